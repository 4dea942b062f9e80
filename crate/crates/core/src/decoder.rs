//! Denoising decoder: noisy label code + conditioning map -> class logits.
//!
//! Six pre-norm blocks of single-scale deformable point attention
//! (per-query learned sampling locations, softmax weights over points, no
//! key dot products), each modulated by an additive time embedding. Offset
//! projections start at zero, so sampling begins on each query's own pixel
//! with uniform point weights.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sc, NodeId, Param, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Sampling points per head and query.
    pub points: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Channels of the noisy mask code.
    pub mask_dim: usize,
    pub cond_channels: usize,
}

impl DecoderConfig {
    pub fn desk(classes: usize, mask_dim: usize, cond_channels: usize) -> Self {
        DecoderConfig { layers: 6, heads: 4, points: 4, hidden: 128, classes, mask_dim, cond_channels }
    }

    pub fn tiny(classes: usize) -> Self {
        DecoderConfig { layers: 2, heads: 2, points: 2, hidden: 16, classes, mask_dim: 8, cond_channels: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.points == 0 {
            return Err(Error::InvalidArgument("decoder layers/heads/points must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

const TIME_FREQS: usize = 32;

/// Sinusoidal bank over t in [0,1] followed by a two-layer MLP.
pub struct TimeEmbedding<T = f32> {
    w1: Param<T>,
    b1: Param<T>,
    w2: Param<T>,
    b2: Param<T>,
}

impl<T: Scalar> TimeEmbedding<T> {
    pub fn init(prefix: &str, hidden: usize, rng: &mut Rng) -> Self {
        TimeEmbedding {
            w1: Param::normal(format!("{prefix}.w1"), vec![2 * TIME_FREQS, hidden], 0.02, rng),
            b1: Param::zeros(format!("{prefix}.b1"), vec![hidden]),
            w2: Param::normal(format!("{prefix}.w2"), vec![hidden, hidden], 0.02, rng),
            b2: Param::zeros(format!("{prefix}.b2"), vec![hidden]),
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]);
    }

    pub fn bank(t: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * TIME_FREQS);
        for i in 0..TIME_FREQS {
            let omega = 1000f64.powf(i as f64 / (TIME_FREQS - 1) as f64);
            v.push((omega * t).sin());
            v.push((omega * t).cos());
        }
        v
    }

    /// Embedding row [1, hidden] for a scalar time.
    pub fn forward(&self, tape: &mut Tape<T>, t: f64) -> Result<NodeId> {
        let bank = Tensor::new(vec![1, 2 * TIME_FREQS], Self::bank(t).iter().map(|&v| sc(v)).collect())?;
        let bank = tape.leaf(bank);
        let w1 = tape.param(&self.w1);
        let b1 = tape.param(&self.b1);
        let h = tape.linear(bank, w1, Some(b1))?;
        let h = tape.gelu(h);
        let w2 = tape.param(&self.w2);
        let b2 = tape.param(&self.b2);
        tape.linear(h, w2, Some(b2))
    }
}

struct DecBlock<T> {
    ln1_g: Param<T>,
    ln1_b: Param<T>,
    offset_w: Param<T>,
    offset_b: Param<T>,
    weight_w: Param<T>,
    weight_b: Param<T>,
    value_w: Param<T>,
    value_b: Param<T>,
    out_w: Param<T>,
    out_b: Param<T>,
    ln2_g: Param<T>,
    ln2_b: Param<T>,
    mlp_w1: Param<T>,
    mlp_b1: Param<T>,
    mlp_w2: Param<T>,
    mlp_b2: Param<T>,
}

impl<T: Scalar> DecBlock<T> {
    fn init(prefix: &str, cfg: &DecoderConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        let hp = cfg.heads * cfg.points;
        let mlp = h * 2;
        DecBlock {
            ln1_g: Param::ones(format!("{prefix}.ln1_g"), vec![h]),
            ln1_b: Param::zeros(format!("{prefix}.ln1_b"), vec![h]),
            offset_w: Param::zeros(format!("{prefix}.offset_w"), vec![h, hp * 2]),
            offset_b: Param::zeros(format!("{prefix}.offset_b"), vec![hp * 2]),
            weight_w: Param::zeros(format!("{prefix}.weight_w"), vec![h, hp]),
            weight_b: Param::zeros(format!("{prefix}.weight_b"), vec![hp]),
            value_w: Param::normal(format!("{prefix}.value_w"), vec![h, h], 0.02, rng),
            value_b: Param::zeros(format!("{prefix}.value_b"), vec![h]),
            out_w: Param::normal(format!("{prefix}.out_w"), vec![h, h], 0.02, rng),
            out_b: Param::zeros(format!("{prefix}.out_b"), vec![h]),
            ln2_g: Param::ones(format!("{prefix}.ln2_g"), vec![h]),
            ln2_b: Param::zeros(format!("{prefix}.ln2_b"), vec![h]),
            mlp_w1: Param::normal(format!("{prefix}.mlp_w1"), vec![h, mlp], 0.02, rng),
            mlp_b1: Param::zeros(format!("{prefix}.mlp_b1"), vec![mlp]),
            mlp_w2: Param::normal(format!("{prefix}.mlp_w2"), vec![mlp, h], 0.02, rng),
            mlp_b2: Param::zeros(format!("{prefix}.mlp_b2"), vec![h]),
        }
    }

    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([
            self.ln1_g.clone(),
            self.ln1_b.clone(),
            self.offset_w.clone(),
            self.offset_b.clone(),
            self.weight_w.clone(),
            self.weight_b.clone(),
            self.value_w.clone(),
            self.value_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
            self.ln2_g.clone(),
            self.ln2_b.clone(),
            self.mlp_w1.clone(),
            self.mlp_b1.clone(),
            self.mlp_w2.clone(),
            self.mlp_b2.clone(),
        ]);
    }

    /// tokens: [N, hidden] laid out row-major over an h x w map;
    /// temb: [hidden] added after the first norm.
    fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: NodeId,
        temb: NodeId,
        cfg: &DecoderConfig,
        refs: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let n = h * w;
        let hp = cfg.heads * cfg.points;

        let g1 = tape.param(&self.ln1_g);
        let b1 = tape.param(&self.ln1_b);
        let n1 = tape.layer_norm(tokens, g1, b1)?;
        let n1 = tape.row_broadcast_add(n1, temb)?;

        let ow = tape.param(&self.offset_w);
        let ob = tape.param(&self.offset_b);
        let offs = tape.linear(n1, ow, Some(ob))?;
        let offs = tape.reshape(offs, vec![n * hp, 2])?;
        // one-pixel units in normalized coordinates
        let unit = Tensor::new(vec![2], vec![sc(2.0 / w as f64), sc(2.0 / h as f64)])?;
        let unit = tape.leaf(unit);
        let offs = tape.row_broadcast_mul(offs, unit)?;
        let base = tape.leaf(refs.clone());
        let locs = tape.add(base, offs)?;

        let ww = tape.param(&self.weight_w);
        let wb = tape.param(&self.weight_b);
        let wlog = tape.linear(n1, ww, Some(wb))?;
        let wlog = tape.reshape(wlog, vec![n * cfg.heads, cfg.points])?;
        let wsoft = tape.softmax(wlog, 1)?;
        let wsoft = tape.reshape(wsoft, vec![n, hp])?;

        let vw = tape.param(&self.value_w);
        let vb = tape.param(&self.value_b);
        let vals = tape.linear(n1, vw, Some(vb))?;
        let vmap = tape.from_tokens(vals, h, w)?;
        let sampled = tape.bilinear_sample(vmap, locs)?;
        let attn = tape.deform_point_attend(sampled, wsoft, cfg.heads, cfg.points)?;
        let pw = tape.param(&self.out_w);
        let pb = tape.param(&self.out_b);
        let attn = tape.linear(attn, pw, Some(pb))?;
        let t2 = tape.add(tokens, attn)?;

        let g2 = tape.param(&self.ln2_g);
        let b2 = tape.param(&self.ln2_b);
        let n2 = tape.layer_norm(t2, g2, b2)?;
        let w1 = tape.param(&self.mlp_w1);
        let mb1 = tape.param(&self.mlp_b1);
        let m = tape.linear(n2, w1, Some(mb1))?;
        let m = tape.gelu(m);
        let w2 = tape.param(&self.mlp_w2);
        let mb2 = tape.param(&self.mlp_b2);
        let m = tape.linear(m, w2, Some(mb2))?;
        tape.add(t2, m)
    }
}

pub struct DecodeOut {
    /// Logits at the mask resolution, [K, h/4, w/4].
    pub low: NodeId,
    /// Logits bilinearly upsampled x4, [K, h, w].
    pub full: NodeId,
}

pub struct Decoder<T = f32> {
    pub cfg: DecoderConfig,
    in_w: Param<T>,
    in_b: Param<T>,
    time: TimeEmbedding<T>,
    blocks: Vec<DecBlock<T>>,
    lnf_g: Param<T>,
    lnf_b: Param<T>,
    out_w: Param<T>,
    out_b: Param<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn init(cfg: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let cin = cfg.mask_dim + cfg.cond_channels;
        let blocks = (0..cfg.layers)
            .map(|i| DecBlock::init(&format!("dec.b{i}"), &cfg, rng))
            .collect();
        Ok(Decoder {
            in_w: Param::normal("dec.in_w", vec![cin, cfg.hidden], 0.02, rng),
            in_b: Param::zeros("dec.in_b", vec![cfg.hidden]),
            time: TimeEmbedding::init("dec.time", cfg.hidden, rng),
            blocks,
            lnf_g: Param::ones("dec.lnf_g", vec![cfg.hidden]),
            lnf_b: Param::zeros("dec.lnf_b", vec![cfg.hidden]),
            out_w: Param::normal("dec.out_w", vec![cfg.hidden, cfg.classes], 0.02, rng),
            out_b: Param::zeros("dec.out_b", vec![cfg.classes]),
            cfg,
        })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.in_w.clone(), self.in_b.clone()]);
        self.time.collect(out);
        for b in &self.blocks {
            b.collect(out);
        }
        out.extend([self.lnf_g.clone(), self.lnf_b.clone(), self.out_w.clone(), self.out_b.clone()]);
    }

    pub fn time_params(&self) -> [&Param<T>; 4] {
        [&self.time.w1, &self.time.b1, &self.time.w2, &self.time.b2]
    }

    /// Every query samples around its own pixel center; the base locations
    /// [N*heads*points, 2] repeat the center for each head/point slot.
    fn reference_tensor(&self, h: usize, w: usize) -> Tensor<T> {
        let hp = self.cfg.heads * self.cfg.points;
        let mut data = Vec::with_capacity(h * w * hp * 2);
        for y in 0..h {
            for x in 0..w {
                let cx = (2 * x + 1) as f64 / w as f64 - 1.0;
                let cy = (2 * y + 1) as f64 / h as f64 - 1.0;
                for _ in 0..hp {
                    data.push(sc(cx));
                    data.push(sc(cy));
                }
            }
        }
        Tensor::new(vec![h * w * hp, 2], data).expect("reference tensor shape")
    }

    /// mask: [D, h/4, w/4]; cond: [cond_channels, h/4, w/4]; t in [0,1].
    pub fn forward(&self, tape: &mut Tape<T>, mask: NodeId, cond: NodeId, t: f64) -> Result<DecodeOut> {
        let sm = tape.value(mask).shape().to_vec();
        let sc_ = tape.value(cond).shape().to_vec();
        if sm.len() != 3 || sm[0] != self.cfg.mask_dim {
            return Err(Error::shape("decode", format!("mask {:?}", sm)));
        }
        if sc_ != vec![self.cfg.cond_channels, sm[1], sm[2]] {
            return Err(Error::shape("decode", format!("cond {:?} vs mask {:?}", sc_, sm)));
        }
        let (h4, w4) = (sm[1], sm[2]);

        let tm = tape.to_tokens(mask)?;
        let tc = tape.to_tokens(cond)?;
        let cat = tape.concat_cols(tm, tc)?;
        let iw = tape.param(&self.in_w);
        let ib = tape.param(&self.in_b);
        let mut tokens = tape.linear(cat, iw, Some(ib))?;

        let temb = self.time.forward(tape, t)?;
        let temb = tape.reshape(temb, vec![self.cfg.hidden])?;
        let refs = self.reference_tensor(h4, w4);
        for block in &self.blocks {
            tokens = block.forward(tape, tokens, temb, &self.cfg, &refs, h4, w4)?;
        }

        let gf = tape.param(&self.lnf_g);
        let bf = tape.param(&self.lnf_b);
        let nf = tape.layer_norm(tokens, gf, bf)?;
        let ow = tape.param(&self.out_w);
        let ob = tape.param(&self.out_b);
        let logits = tape.linear(nf, ow, Some(ob))?;
        let low = tape.from_tokens(logits, h4, w4)?;
        let full = tape.resize_bilinear(low, h4 * 4, w4 * 4)?;
        Ok(DecodeOut { low, full })
    }
}

/// Per-pixel argmax over the channel axis; ties go to the lowest class id.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::shape("predict_mask", format!("expected [K,h,w], got {:?}", shape)));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits in predict_mask".into()));
    }
    let (k, n) = (shape[0], shape[1] * shape[2]);
    let data = logits.data();
    let mut out = vec![0u8; n];
    for (pos, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        for c in 1..k {
            if data[c * n + pos] > data[best * n + pos] {
                best = c;
            }
        }
        *slot = best as u8;
    }
    Ok(out)
}
