//! Full model: condition encoder + diffusion mask decoder + label codebook,
//! and the iterative sampling loop that inverts the corruption process.

use crate::data::RgbdSample;
use crate::decoder::{predict_mask, Decoder, DecoderConfig};
use crate::diffusion::{ddim_step, LabelCodebook, NoiseSchedule, SamplerConfig};
use crate::encoder::{Encoder, StageSpec, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Param, Tape, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    /// Square input side; must be divisible by 32.
    pub input_hw: usize,
    /// Label embedding width D.
    pub embed_dim: usize,
    /// Encoding scale s.
    pub scale: f64,
    pub schedule: NoiseSchedule,
    pub encoder: StageSpec,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_points: usize,
    pub dec_hidden: usize,
}

impl ModelConfig {
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            classes,
            input_hw: 64,
            embed_dim: 32,
            scale: 0.01,
            schedule: NoiseSchedule::Cosine,
            encoder: StageSpec::desk(),
            dec_layers: 6,
            dec_heads: 4,
            dec_points: 4,
            dec_hidden: 128,
        }
    }

    /// Minimal configuration for fast tests.
    pub fn tiny(classes: usize) -> Self {
        ModelConfig {
            classes,
            input_hw: 32,
            embed_dim: 8,
            scale: 0.01,
            schedule: NoiseSchedule::Cosine,
            encoder: StageSpec::tiny(),
            dec_layers: 1,
            dec_heads: 2,
            dec_points: 2,
            dec_hidden: 16,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.dec_layers,
            heads: self.dec_heads,
            points: self.dec_points,
            hidden: self.dec_hidden,
            classes: self.classes,
            mask_dim: self.embed_dim,
            cond_channels: COND_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.input_hw % 32 != 0 {
            return Err(Error::InvalidArgument("input side must be divisible by 32".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
    pub codebook: LabelCodebook<f32>,
}

impl Model {
    /// Parameter initialization is a pure function of (cfg, seed).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            encoder: Encoder::init(cfg.encoder, cfg.input_hw, &mut rng::stream(seed, &[0]))?,
            decoder: Decoder::init(cfg.decoder_config(), &mut rng::stream(seed, &[1]))?,
            codebook: LabelCodebook::init(
                cfg.classes,
                cfg.embed_dim,
                cfg.scale,
                &mut rng::stream(seed, &[2]),
            ),
            cfg,
        })
    }

    /// All trainable parameters in a stable order with unique names.
    pub fn params(&self) -> Vec<Param<f32>> {
        let mut out = Vec::new();
        self.encoder.collect(&mut out);
        self.decoder.collect(&mut out);
        out.push(self.codebook.table.clone());
        out
    }

    fn check_inputs(&self, rgb: &Tensor<f32>, depth: &Tensor<f32>) -> Result<()> {
        let s = self.cfg.input_hw;
        if rgb.shape() != [3, s, s] {
            return Err(Error::shape("sample", format!("rgb {:?}, expected [3,{s},{s}]", rgb.shape())));
        }
        if depth.shape() != [1, s, s] {
            return Err(Error::shape("sample", format!("depth {:?}, expected [1,{s},{s}]", depth.shape())));
        }
        Ok(())
    }

    /// Conditioning signal [COND_CHANNELS, s/4, s/4], computed off-tape.
    pub fn condition(&self, rgb: &Tensor<f32>, depth: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_inputs(rgb, depth)?;
        let mut tape = Tape::<f32>::new();
        let r = tape.leaf(rgb.clone());
        let d = tape.leaf(depth.clone());
        let cond = self.encoder.forward(&mut tape, r, d)?;
        Ok(tape.value(cond).clone())
    }

    /// Full inference: encode the condition once, then run `steps`
    /// decode + re-noise iterations from unit Gaussian noise, returning
    /// the full-resolution class map. Bit-deterministic per seed.
    pub fn sample(&self, rgb: &Tensor<f32>, depth: &Tensor<f32>, scfg: &SamplerConfig) -> Result<Vec<u8>> {
        scfg.validate()?;
        let cond = self.condition(rgb, depth)?;
        let s4 = self.cfg.input_hw / 4;
        let noise = rng::normal_vec(&mut rng::stream(scfg.seed, &[0]), self.cfg.embed_dim * s4 * s4, 1.0);
        let mut mask = Tensor::new(vec![self.cfg.embed_dim, s4, s4], noise)?;

        for step in 0..scfg.steps {
            let (t_now, t_next) = scfg.times(step);
            let mut tape = Tape::<f32>::new();
            let m = tape.leaf(mask.clone());
            let c = tape.leaf(cond.clone());
            let out = self.decoder.forward(&mut tape, m, c, t_now)?;
            if step + 1 == scfg.steps {
                return predict_mask(tape.value(out.full));
            }
            let ids: Vec<u32> = predict_mask(tape.value(out.low))?
                .into_iter()
                .map(u32::from)
                .collect();
            mask = ddim_step(&mask, &ids, t_now, t_next, &self.codebook, &self.cfg.schedule)?;
        }
        unreachable!("steps >= 1 enforced by validate")
    }
}

/// Model inputs from a stored sample: rgb passthrough, depth min-max
/// normalized with invalid pixels at 0.
pub fn inputs_from_sample(s: &RgbdSample) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let rgb = Tensor::new(vec![3, s.height, s.width], s.rgb.clone())?;
    let depth = Tensor::new(vec![1, s.height, s.width], s.depth_normalized())?;
    Ok((rgb, depth))
}
