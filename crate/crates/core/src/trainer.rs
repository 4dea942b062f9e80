//! Training loop: corrupt encoded ground truth, decode, ignore-masked
//! cross-entropy, AdamW with decoupled weight decay, warmup-polynomial
//! learning rate, and seeded geometric augmentation.

use std::io::Write;
use std::path::Path;

use crate::checkpoint;
use crate::data::{Dataset, RgbdSample};
use crate::diffusion::IGNORE_ID;
use crate::error::{Error, Result};
use crate::model::{inputs_from_sample, Model};
use crate::rng::{self, Rng};
use crate::tensor::{sc, Param, Tape};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Fraction of total steps spent in linear warmup.
    pub warmup: f64,
    /// Polynomial decay exponent after warmup.
    pub power: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 6e-5,
            weight_decay: 0.01,
            epochs: 40,
            batch: 4,
            warmup: 0.1,
            power: 1.0,
            clip: 1.0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < 0.0 {
            return Err(Error::InvalidArgument("lr0 must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::InvalidArgument("warmup fraction must lie in [0,1)".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to lr0, then lr0 * (1 - progress)^power down to 0.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup * total as f64).round() as usize;
    if step < warm {
        return cfg.lr0 * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.lr0;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr0 * (1.0 - progress).max(0.0).powf(cfg.power)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// AdamW moment accumulators, one pair per parameter tensor.
pub struct Optimizer {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(params: &[Param<f32>]) -> Self {
        Optimizer {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update from the gradients currently stored on the parameters.
/// Decay is decoupled: w -= lr * (mhat/(sqrt(vhat)+eps) + wd*w).
pub fn opt_step(params: &[Param<f32>], opt: &mut Optimizer, lr: f64, wd: f64) -> Result<()> {
    if params.len() != opt.m.len() {
        return Err(Error::InvalidArgument("optimizer built for a different parameter set".into()));
    }
    opt.step += 1;
    let bc1 = 1.0 - BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - BETA2.powi(opt.step as i32);
    for (i, p) in params.iter().enumerate() {
        let mut inner = p.inner.borrow_mut();
        let inner = &mut *inner;
        for j in 0..inner.grad.len() {
            let g = inner.grad[j] as f64;
            let m = &mut opt.m[i][j];
            let v = &mut opt.v[i][j];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            let w = inner.value.data()[j] as f64;
            inner.value.data_mut()[j] = (w - lr * (update + wd * w)) as f32;
        }
    }
    Ok(())
}

fn clip_grads(params: &[Param<f32>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for p in params {
        for &g in p.grad().iter() {
            sq += g as f64 * g as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = (clip / norm) as f32;
        for p in params {
            for g in p.grad_mut().iter_mut() {
                *g *= s;
            }
        }
    }
}

/// Horizontal mirror of the whole triple.
pub fn flip_h(s: &RgbdSample) -> RgbdSample {
    let (w, h) = (s.width, s.height);
    let n = w * h;
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (y * w + x, y * w + (w - 1 - x));
            for ch in 0..3 {
                out.rgb[ch * n + a] = s.rgb[ch * n + b];
            }
            out.depth[a] = s.depth[b];
            out.label[a] = s.label[b];
        }
    }
    out
}

/// Seeded flip + random crop resized back to the original size. One
/// nearest-neighbor index map is shared by rgb, depth and label, so the
/// triple stays pixel-aligned and depth zeros survive unchanged.
pub fn augment(s: &RgbdSample, rng: &mut Rng) -> RgbdSample {
    let flipped;
    let src = if rng::uniform(rng) < 0.5 {
        flipped = flip_h(s);
        &flipped
    } else {
        s
    };
    let (w, h) = (s.width, s.height);
    let scale = 0.7 + 0.3 * rng::uniform(rng);
    let (cw, ch) = (((w as f64 * scale) as usize).max(1), ((h as f64 * scale) as usize).max(1));
    let x0 = (rng::uniform(rng) * (w - cw + 1) as f64) as usize;
    let y0 = (rng::uniform(rng) * (h - ch + 1) as f64) as usize;

    let n = w * h;
    let mut out = src.clone();
    for y in 0..h {
        let sy = (y0 + ((y as f64 + 0.5) * ch as f64 / h as f64) as usize).min(y0 + ch - 1);
        for x in 0..w {
            let sx = (x0 + ((x as f64 + 0.5) * cw as f64 / w as f64) as usize).min(x0 + cw - 1);
            let (dst, srci) = (y * w + x, sy * w + sx);
            for c in 0..3 {
                out.rgb[c * n + dst] = src.rgb[c * n + srci];
            }
            out.depth[dst] = src.depth[srci];
            out.label[dst] = src.label[srci];
        }
    }
    out
}

/// Nearest-neighbor downsample of label ids to (oh, ow).
fn resize_labels(label: &[u8], w: usize, h: usize, ow: usize, oh: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(label[sy * w + sx]);
        }
    }
    out
}

/// One optimizer step over a batch. Per item: draw t ~ U(0,1) and unit
/// Gaussian noise from `noise_rng`, corrupt the encoded quarter-resolution
/// ground truth, decode conditioned on the RGB-D pair, and accumulate
/// ignore-masked cross-entropy at full resolution.
pub fn train_step(
    model: &Model,
    batch: &[RgbdSample],
    params: &[Param<f32>],
    opt: &mut Optimizer,
    lr: f64,
    cfg: &TrainConfig,
    noise_rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for p in params {
        p.zero_grad();
    }
    let mut total = 0.0f64;
    for item in batch {
        let (rgb, depth) = inputs_from_sample(item)?;
        let (h, w) = (item.height, item.width);
        let (h4, w4) = (h / 4, w / 4);

        let t = rng::uniform(noise_rng);
        let eps = rng::normal_vec(noise_rng, model.cfg.embed_dim * h4 * w4, 1.0);

        let mut tape = Tape::<f32>::new();
        let rn = tape.leaf(rgb);
        let dn = tape.leaf(depth);
        let cond = model.encoder.forward(&mut tape, rn, dn)?;

        let low_ids = model.codebook.ids_for(&resize_labels(&item.label, w, h, w4, h4))?;
        let enc = model.codebook.encode_tape(&mut tape, &low_ids, h4, w4)?;
        let a = model.cfg.schedule.alpha_bar(t);
        let signal = tape.scale(enc, sc(a.sqrt()));
        let eps_node = {
            let te = crate::tensor::Tensor::new(vec![model.cfg.embed_dim, h4, w4], eps)?;
            tape.leaf(te)
        };
        let noise = tape.scale(eps_node, sc((1.0 - a).sqrt()));
        let corrupted = tape.add(signal, noise)?;

        let out = model.decoder.forward(&mut tape, corrupted, cond, t)?;
        let logits = tape.to_tokens(out.full)?;
        let targets: Vec<u32> = item.label.iter().map(|&l| l as u32).collect();
        let loss = tape.cross_entropy(logits, &targets, IGNORE_ID as u32)?;
        let scaled = tape.scale(loss, sc(1.0 / batch.len() as f64));

        let lv = tape.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {} at t={:.4}", lv, t)));
        }
        total += lv;
        tape.backward(scaled)?;
    }
    clip_grads(params, cfg.clip);
    opt_step(params, opt, lr, cfg.weight_decay)?;
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Full training run. Deterministic per (model init, dataset, config):
/// epoch shuffles, augmentations and noise draws all derive from
/// cfg.seed through fixed stream paths. Writes `loss.csv` and
/// `model.ckpt` to `out_dir` when given.
pub fn fit(model: &Model, data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let params = model.params();
    let mut opt = Optimizer::new(&params);
    let n = data.samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut log = Vec::new();

    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let shuffle_rng = &mut rng::stream(cfg.seed, &[1, epoch as u64]);
        for i in (1..n).rev() {
            let j = (rng::uniform(shuffle_rng) * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<RgbdSample> = chunk
                .iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let s = &data.samples[idx];
                    if cfg.augment {
                        augment(s, &mut rng::stream(cfg.seed, &[2, epoch as u64, step as u64, i as u64]))
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let lr = lr_at(global, total, cfg);
            let noise_rng = &mut rng::stream(cfg.seed, &[3, epoch as u64, step as u64]);
            let loss = train_step(model, &batch, &params, &mut opt, lr, cfg, noise_rng)?;
            log.push(LogRow { epoch, step: global, loss, lr });
            global += 1;
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
        writeln!(csv, "epoch,step,loss,lr")?;
        for r in &log {
            writeln!(csv, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr)?;
        }
        checkpoint::save_model(&dir.join("model.ckpt"), model)?;
    }
    Ok(log)
}
