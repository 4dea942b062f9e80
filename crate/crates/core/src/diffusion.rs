//! Noise schedules, label encoding and the DDIM update rule.
//!
//! Labels are embedded into a small continuous code, squashed to [-s, s],
//! and diffused with Gaussian noise; sampling inverts the process with a
//! handful of deterministic DDIM steps.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sc, NodeId, Param, Scalar, Tape, Tensor};

/// Label id treated as "no supervision here".
pub const IGNORE_ID: u8 = 255;

/// Floor applied inside the cosine log-SNR to keep it finite at t=0.
const LOG_FLOOR: f64 = 1e-5;

const COSINE_NS: f64 = 0.0002;
const COSINE_DS: f64 = 0.00025;

/// Virtual step count for the linear schedule's cumulative product.
const LINEAR_T: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum NoiseSchedule {
    Cosine,
    /// Per-step noise rate rises linearly from `beta0` to `beta1` over
    /// 1000 virtual steps.
    Linear { beta0: f64, beta1: f64 },
}

impl NoiseSchedule {
    pub fn linear_default() -> Self {
        NoiseSchedule::Linear { beta0: 1e-4, beta1: 0.02 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(NoiseSchedule::Cosine),
            "linear" => Ok(Self::linear_default()),
            other => Err(Error::InvalidArgument(format!("unknown schedule '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSchedule::Cosine => "cosine",
            NoiseSchedule::Linear { .. } => "linear",
        }
    }

    /// log-SNR gamma(t); alpha_bar = logistic(gamma).
    pub fn log_snr(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Cosine => {
                let n = ((t + COSINE_NS) / (1.0 + COSINE_DS) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(-2);
                // additive epsilon rather than a hard clamp: caps gamma near
                // t=0 without flattening it, so alpha_bar stays strictly
                // monotone on any grid
                -(n - 1.0 + LOG_FLOOR).ln()
            }
            NoiseSchedule::Linear { .. } => {
                let a = self.alpha_bar(t);
                (a / (1.0 - a).max(f64::MIN_POSITIVE)).ln()
            }
        }
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Cosine => {
                let g = self.log_snr(t);
                1.0 / (1.0 + (-g).exp())
            }
            NoiseSchedule::Linear { beta0, beta1 } => {
                // cumulative product up to s = t*T, linearly interpolated
                // between whole steps so the map stays strictly monotone
                let beta = |s: usize| beta0 + (beta1 - beta0) * s as f64 / (LINEAR_T - 1) as f64;
                let sf = (t * LINEAR_T as f64).clamp(0.0, (LINEAR_T - 1) as f64);
                let i = sf.floor() as usize;
                let frac = sf - i as f64;
                let mut log_a = 0.0;
                for s in 0..=i {
                    log_a += (1.0 - beta(s)).ln();
                }
                if frac > 0.0 && i + 1 < LINEAR_T {
                    log_a += frac * (1.0 - beta(i + 1)).ln();
                }
                log_a.exp()
            }
        }
    }
}

/// Embedding table mapping class ids to D-dim codes in [-s, s].
pub struct LabelCodebook<T = f32> {
    pub table: Param<T>,
    pub scale: f64,
}

impl<T: Scalar> LabelCodebook<T> {
    pub fn init(classes: usize, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        LabelCodebook {
            table: Param::normal("codebook.table", vec![classes, dim], 1.0, rng),
            scale,
        }
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Map raw labels to table ids; ignore pixels borrow the class-0 code
    /// (they are masked out of the loss elsewhere).
    pub fn ids_for(&self, labels: &[u8]) -> Result<Vec<u32>> {
        let k = self.classes() as u32;
        labels
            .iter()
            .map(|&l| {
                let id = if l == IGNORE_ID { 0 } else { l as u32 };
                if id >= k {
                    Err(Error::InvalidArgument(format!("label {} >= {} classes", l, k)))
                } else {
                    Ok(id)
                }
            })
            .collect()
    }

    /// Differentiable encoding: [D, h, w] node on the tape.
    pub fn encode_tape(&self, tape: &mut Tape<T>, ids: &[u32], h: usize, w: usize) -> Result<NodeId> {
        if ids.len() != h * w {
            return Err(Error::shape("encode_labels", format!("{} ids for {}x{}", ids.len(), h, w)));
        }
        let table = tape.param(&self.table);
        let emb = tape.embedding(table, ids)?;
        let sig = tape.sigmoid(emb);
        let centered = tape.affine(sig, sc(2.0), sc(-1.0));
        let scaled = tape.scale(centered, sc(self.scale));
        tape.from_tokens(scaled, h, w)
    }

    /// Same encoding without a tape, for the sampling loop.
    pub fn encode_plain(&self, ids: &[u32], h: usize, w: usize) -> Result<Tensor<T>> {
        if ids.len() != h * w {
            return Err(Error::shape("encode_labels", format!("{} ids for {}x{}", ids.len(), h, w)));
        }
        let table = self.table.value();
        let (k, d) = (self.classes(), self.dim());
        let mut out = vec![T::zero(); d * h * w];
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= k {
                return Err(Error::InvalidArgument(format!("label id {} >= {} classes", id, k)));
            }
            for j in 0..d {
                let raw = table.data()[id as usize * d + j].to_f64().unwrap();
                let v = (1.0 / (1.0 + (-raw).exp()) * 2.0 - 1.0) * self.scale;
                out[j * h * w + pos] = sc(v);
            }
        }
        Tensor::new(vec![d, h, w], out)
    }
}

/// Forward corruption: sqrt(a)*y + sqrt(1-a)*eps with a = alpha_bar(t).
pub fn corrupt<T: Scalar>(y_enc: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if y_enc.shape() != eps.shape() {
        return Err(Error::shape(
            "corrupt",
            format!("{:?} vs {:?}", y_enc.shape(), eps.shape()),
        ));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = y_enc
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| sc::<T>(sa) * y + sc::<T>(sn) * e)
        .collect();
    Tensor::new(y_enc.shape().to_vec(), data)
}

/// One DDIM update: re-encode the predicted mask, recover the implied
/// noise at t_now, and form the state at t_next.
pub fn ddim_step<T: Scalar>(
    mask_t: &Tensor<T>,
    pred_ids: &[u32],
    t_now: f64,
    t_next: f64,
    codebook: &LabelCodebook<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let shape = mask_t.shape().to_vec();
    if shape.len() != 3 || shape[0] != codebook.dim() {
        return Err(Error::shape("ddim_step", format!("mask {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let enc = codebook.encode_plain(pred_ids, h, w)?;
    let a_now = sched.alpha_bar(t_now);
    let a_next = sched.alpha_bar(t_next);
    let sa_now = a_now.sqrt();
    // guards a_now == 1 exactly
    let denom = (1.0 - a_now).max(1e-12).sqrt();
    let (sa_next, sn_next) = (a_next.sqrt(), (1.0 - a_next).sqrt());
    let data = mask_t
        .data()
        .iter()
        .zip(enc.data())
        .map(|(&m, &e)| {
            let m = m.to_f64().unwrap();
            let e = e.to_f64().unwrap();
            let eps = (m - sa_now * e) / denom;
            sc::<T>(sa_next * e + sn_next * eps)
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Extra gap added to the next timestep each iteration.
    pub td: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 3, td: 1, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampler steps must be >= 1".into()));
        }
        Ok(())
    }

    /// (t_now, t_next) for one iteration of the sampling loop.
    pub fn times(&self, step: usize) -> (f64, f64) {
        let steps = self.steps as f64;
        let t_now = 1.0 - step as f64 / steps;
        let t_next = (1.0 - (step + 1 + self.td) as f64 / steps).max(0.0);
        (t_now, t_next)
    }
}
