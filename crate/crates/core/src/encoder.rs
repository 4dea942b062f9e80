//! Dual-branch hierarchical encoder over RGB and depth.
//!
//! Each branch is a four-stage pyramid of deformable-attention blocks.
//! At every stage the branches exchange information twice: a rectification
//! step adds gated cross-modal corrections (identity at init), and a fusion
//! step cross-attends pooled tokens of the other modality. The fused
//! pyramid is merged by an FPN into a 256-channel conditioning map at 1/4
//! resolution.

use crate::attention::{DatBlockParams, MhsaParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, Param, Scalar, Tape, Tensor};

/// Channels of the conditioning signal produced by the FPN.
pub const COND_CHANNELS: usize = 256;

/// Spatial reduction of each stage relative to the input image.
pub const DOWNSAMPLE: [usize; 4] = [4, 8, 16, 32];

const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StageSpec {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
}

impl StageSpec {
    pub fn desk() -> Self {
        StageSpec { channels: [32, 64, 128, 256], blocks: [1, 1, 2, 1] }
    }

    /// Small configuration for gradient checks and shape tests.
    pub fn tiny() -> Self {
        StageSpec { channels: [8, 16, 32, 64], blocks: [1, 1, 1, 1] }
    }

    fn heads(c: usize) -> usize {
        (c / 16).max(1)
    }
}

pub struct ConvParams<T = f32> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn init(
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        ConvParams {
            w: Param::normal(format!("{prefix}.w"), vec![cout, cin, k, k], std, rng),
            b: Param::zeros(format!("{prefix}.b"), vec![cout]),
            stride,
            pad,
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.w.clone(), self.b.clone()]);
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

struct StageParams<T> {
    /// Stride-2 transition conv from the previous stage (absent at stage 0).
    down: Option<ConvParams<T>>,
    /// Learned positional map, bilinearly resized to the stage resolution.
    pos: Param<T>,
    blocks: Vec<DatBlockParams<T>>,
}

/// One encoder branch: patch embed then four stages.
pub struct Branch<T = f32> {
    patch1: ConvParams<T>,
    patch2: ConvParams<T>,
    stages: Vec<StageParams<T>>,
}

impl<T: Scalar> Branch<T> {
    /// `input_hw` fixes the stage resolutions the reference grids are built
    /// for; forward accepts any size whose stage maps the grids divide.
    pub fn init(prefix: &str, spec: &StageSpec, input_hw: usize, rng: &mut Rng) -> Result<Self> {
        let c0 = spec.channels[0];
        let mid = (c0 / 2).max(4);
        let patch1 = ConvParams::init(&format!("{prefix}.patch1"), mid, 3, 3, 2, 1, rng);
        let patch2 = ConvParams::init(&format!("{prefix}.patch2"), c0, mid, 3, 2, 1, rng);
        let mut stages = Vec::new();
        for s in 0..4 {
            let c = spec.channels[s];
            let res = input_hw / DOWNSAMPLE[s];
            let g = (res / 2).max(1);
            let down = (s > 0).then(|| {
                ConvParams::init(
                    &format!("{prefix}.down{s}"),
                    c,
                    spec.channels[s - 1],
                    3,
                    2,
                    1,
                    rng,
                )
            });
            let pos = Param::zeros(format!("{prefix}.pos{s}"), vec![c, 8, 8]);
            let mut blocks = Vec::new();
            for bi in 0..spec.blocks[s] {
                blocks.push(DatBlockParams::init(
                    &format!("{prefix}.s{s}b{bi}"),
                    c,
                    StageSpec::heads(c),
                    g,
                    g,
                    MLP_RATIO,
                    rng,
                )?);
            }
            stages.push(StageParams { down, pos, blocks });
        }
        Ok(Branch { patch1, patch2, stages })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        self.patch1.collect(out);
        self.patch2.collect(out);
        for s in &self.stages {
            if let Some(d) = &s.down {
                d.collect(out);
            }
            out.push(s.pos.clone());
            for b in &s.blocks {
                b.collect(out);
            }
        }
    }

    /// img: [3,h,w] with h,w divisible by 32. Returns the four stage maps.
    pub fn forward(&self, tape: &mut Tape<T>, img: NodeId) -> Result<[NodeId; 4]> {
        let shape = tape.value(img).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("encode_branch", format!("expected [3,h,w], got {:?}", shape)));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {}x{} not divisible by 32",
                h, w
            )));
        }
        let e = self.patch1.forward(tape, img)?;
        let e = tape.gelu(e);
        let mut x = self.patch2.forward(tape, e)?;
        let mut feats = [0; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                x = down.forward(tape, x)?;
            }
            let (hs, ws) = (h / DOWNSAMPLE[s], w / DOWNSAMPLE[s]);
            let pos = tape.param(&stage.pos);
            let pos = tape.resize_bilinear(pos, hs, ws)?;
            x = tape.add(x, pos)?;
            for block in &stage.blocks {
                x = block.forward(tape, x)?;
            }
            feats[s] = x;
        }
        Ok(feats)
    }

    /// Deformed sample locations [G,2] (normalized [-1,1], [x,y] rows) of
    /// the first stage's first attention block, as seen by that block at
    /// forward time. Visualization aid only.
    pub fn probe_points(&self, tape: &mut Tape<T>, img: NodeId) -> Result<Tensor<T>> {
        let shape = tape.value(img).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("probe_points", format!("expected [3,h,w], got {:?}", shape)));
        }
        let (h, w) = (shape[1], shape[2]);
        let e = self.patch1.forward(tape, img)?;
        let e = tape.gelu(e);
        let mut x = self.patch2.forward(tape, e)?;
        let stage = &self.stages[0];
        let pos = tape.param(&stage.pos);
        let pos = tape.resize_bilinear(pos, h / DOWNSAMPLE[0], w / DOWNSAMPLE[0])?;
        x = tape.add(x, pos)?;
        let block = &stage.blocks[0];
        let t = tape.to_tokens(x)?;
        let g1 = tape.param(&block.ln1_g);
        let b1 = tape.param(&block.ln1_b);
        let n1 = tape.layer_norm(t, g1, b1)?;
        let n1_map = tape.from_tokens(n1, h / DOWNSAMPLE[0], w / DOWNSAMPLE[0])?;
        let pts = block.deform.sample_points(tape, n1_map)?;
        Ok(tape.value(pts).clone())
    }
}

/// Cross-modal rectification. Each modality receives gated corrections
/// built from the other; both gate scales start at zero, so the module is
/// an exact identity at init.
pub struct FrmParams<T = f32> {
    // channel gates, one two-layer MLP per direction, fed by pooled stats
    ch_w1_r: Param<T>,
    ch_b1_r: Param<T>,
    ch_w2_r: Param<T>,
    ch_b2_r: Param<T>,
    ch_w1_d: Param<T>,
    ch_b1_d: Param<T>,
    ch_w2_d: Param<T>,
    ch_b2_d: Param<T>,
    // spatial gates, one single-channel map per direction
    sp_w_r: Param<T>,
    sp_b_r: Param<T>,
    sp_w_d: Param<T>,
    sp_b_d: Param<T>,
    pub lam_c_r: Param<T>,
    pub lam_s_r: Param<T>,
    pub lam_c_d: Param<T>,
    pub lam_s_d: Param<T>,
}

impl<T: Scalar> FrmParams<T> {
    pub fn init(prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let hidden = (c / 2).max(4);
        let mlp = |tag: &str, rng: &mut Rng| {
            (
                Param::normal(format!("{prefix}.ch_w1_{tag}"), vec![2 * c, hidden], 0.02, rng),
                Param::zeros(format!("{prefix}.ch_b1_{tag}"), vec![hidden]),
                Param::normal(format!("{prefix}.ch_w2_{tag}"), vec![hidden, c], 0.02, rng),
                Param::zeros(format!("{prefix}.ch_b2_{tag}"), vec![c]),
            )
        };
        let (ch_w1_r, ch_b1_r, ch_w2_r, ch_b2_r) = mlp("r", rng);
        let (ch_w1_d, ch_b1_d, ch_w2_d, ch_b2_d) = mlp("d", rng);
        FrmParams {
            ch_w1_r,
            ch_b1_r,
            ch_w2_r,
            ch_b2_r,
            ch_w1_d,
            ch_b1_d,
            ch_w2_d,
            ch_b2_d,
            sp_w_r: Param::normal(format!("{prefix}.sp_w_r"), vec![2 * c, 1], 0.02, rng),
            sp_b_r: Param::zeros(format!("{prefix}.sp_b_r"), vec![1]),
            sp_w_d: Param::normal(format!("{prefix}.sp_w_d"), vec![2 * c, 1], 0.02, rng),
            sp_b_d: Param::zeros(format!("{prefix}.sp_b_d"), vec![1]),
            lam_c_r: Param::zeros(format!("{prefix}.lam_c_r"), vec![1]),
            lam_s_r: Param::zeros(format!("{prefix}.lam_s_r"), vec![1]),
            lam_c_d: Param::zeros(format!("{prefix}.lam_c_d"), vec![1]),
            lam_s_d: Param::zeros(format!("{prefix}.lam_s_d"), vec![1]),
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([
            self.ch_w1_r.clone(),
            self.ch_b1_r.clone(),
            self.ch_w2_r.clone(),
            self.ch_b2_r.clone(),
            self.ch_w1_d.clone(),
            self.ch_b1_d.clone(),
            self.ch_w2_d.clone(),
            self.ch_b2_d.clone(),
            self.sp_w_r.clone(),
            self.sp_b_r.clone(),
            self.sp_w_d.clone(),
            self.sp_b_d.clone(),
            self.lam_c_r.clone(),
            self.lam_s_r.clone(),
            self.lam_c_d.clone(),
            self.lam_s_d.clone(),
        ]);
    }

    pub fn forward(&self, tape: &mut Tape<T>, f_rgb: NodeId, f_d: NodeId) -> Result<(NodeId, NodeId)> {
        let sr = tape.value(f_rgb).shape().to_vec();
        if sr != tape.value(f_d).shape() {
            return Err(Error::shape("frm", format!("{:?} vs {:?}", sr, tape.value(f_d).shape())));
        }
        let (c, h, w) = (sr[0], sr[1], sr[2]);
        let tr = tape.to_tokens(f_rgb)?;
        let td = tape.to_tokens(f_d)?;

        let gr = tape.avg_pool(f_rgb, 1, 1)?;
        let gr = tape.reshape(gr, vec![1, c])?;
        let gd = tape.avg_pool(f_d, 1, 1)?;
        let gd = tape.reshape(gd, vec![1, c])?;
        let gcat = tape.concat_cols(gr, gd)?;
        let scat = tape.concat_cols(tr, td)?;

        let direction = |tape: &mut Tape<T>,
                         own: NodeId,
                         other: NodeId,
                         w1: &Param<T>,
                         b1: &Param<T>,
                         w2: &Param<T>,
                         b2: &Param<T>,
                         sw: &Param<T>,
                         sb: &Param<T>,
                         lam_c: &Param<T>,
                         lam_s: &Param<T>|
         -> Result<NodeId> {
            let w1 = tape.param(w1);
            let b1 = tape.param(b1);
            let w2 = tape.param(w2);
            let b2 = tape.param(b2);
            let hsum = tape.linear(gcat, w1, Some(b1))?;
            let hact = tape.gelu(hsum);
            let glog = tape.linear(hact, w2, Some(b2))?;
            let gate = tape.sigmoid(glog);
            let gate = tape.reshape(gate, vec![c])?;
            let chan = tape.row_broadcast_mul(other, gate)?;

            let sw = tape.param(sw);
            let sb = tape.param(sb);
            let slog = tape.linear(scat, sw, Some(sb))?;
            let sgate = tape.sigmoid(slog);
            let sgate = tape.reshape(sgate, vec![h * w])?;
            let spat = tape.col_broadcast_mul(other, sgate)?;

            let lc = tape.param(lam_c);
            let ls = tape.param(lam_s);
            let chan = tape.mul_scalar_node(chan, lc)?;
            let spat = tape.mul_scalar_node(spat, ls)?;
            let corr = tape.add(chan, spat)?;
            tape.add(own, corr)
        };

        let out_r = direction(
            tape, tr, td, &self.ch_w1_r, &self.ch_b1_r, &self.ch_w2_r, &self.ch_b2_r,
            &self.sp_w_r, &self.sp_b_r, &self.lam_c_r, &self.lam_s_r,
        )?;
        let out_d = direction(
            tape, td, tr, &self.ch_w1_d, &self.ch_b1_d, &self.ch_w2_d, &self.ch_b2_d,
            &self.sp_w_d, &self.sp_b_d, &self.lam_c_d, &self.lam_s_d,
        )?;
        let out_r = tape.from_tokens(out_r, h, w)?;
        let out_d = tape.from_tokens(out_d, h, w)?;
        Ok((out_r, out_d))
    }
}

/// Cross-modal fusion: each modality's tokens attend the other's pooled
/// tokens, then the pair is concatenated and projected back to the stage
/// width. The attention output projections start at zero, so an untrained
/// layer reduces to the concat projection.
pub struct FfmParams<T = f32> {
    cross_r: MhsaParams<T>,
    cross_d: MhsaParams<T>,
    fuse_w: Param<T>,
    fuse_b: Param<T>,
    /// Stage maps are pooled by this factor for keys/values, landing all
    /// stages at the same 1/32-of-input token count.
    pool_div: usize,
}

impl<T: Scalar> FfmParams<T> {
    pub fn init(prefix: &str, c: usize, pool_div: usize, rng: &mut Rng) -> Result<Self> {
        let cross_r = MhsaParams::init(&format!("{prefix}.xr"), c, StageSpec::heads(c), rng)?;
        let cross_d = MhsaParams::init(&format!("{prefix}.xd"), c, StageSpec::heads(c), rng)?;
        for p in [&cross_r.w_out, &cross_d.w_out] {
            for v in p.value_mut().data_mut() {
                *v = T::zero();
            }
        }
        Ok(FfmParams {
            cross_r,
            cross_d,
            fuse_w: Param::normal(format!("{prefix}.fuse_w"), vec![2 * c, c], 0.02, rng),
            fuse_b: Param::zeros(format!("{prefix}.fuse_b"), vec![c]),
            pool_div,
        })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        self.cross_r.collect(out);
        self.cross_d.collect(out);
        out.extend([self.fuse_w.clone(), self.fuse_b.clone()]);
    }

    pub fn forward(&self, tape: &mut Tape<T>, f_rgb: NodeId, f_d: NodeId) -> Result<NodeId> {
        let sr = tape.value(f_rgb).shape().to_vec();
        if sr != tape.value(f_d).shape() {
            return Err(Error::shape("ffm", format!("{:?} vs {:?}", sr, tape.value(f_d).shape())));
        }
        let (h, w) = (sr[1], sr[2]);
        let (ph, pw) = ((h / self.pool_div).max(1), (w / self.pool_div).max(1));
        let tr = tape.to_tokens(f_rgb)?;
        let td = tape.to_tokens(f_d)?;
        let pr = tape.avg_pool(f_rgb, ph, pw)?;
        let pr = tape.to_tokens(pr)?;
        let pd = tape.avg_pool(f_d, ph, pw)?;
        let pd = tape.to_tokens(pd)?;

        let ar = self.cross_r.attend(tape, tr, pd)?;
        let r2 = tape.add(tr, ar)?;
        let ad = self.cross_d.attend(tape, td, pr)?;
        let d2 = tape.add(td, ad)?;

        let cat = tape.concat_cols(r2, d2)?;
        let fw = tape.param(&self.fuse_w);
        let fb = tape.param(&self.fuse_b);
        let fused = tape.linear(cat, fw, Some(fb))?;
        tape.from_tokens(fused, h, w)
    }
}

/// Top-down FPN: 1x1 laterals to 256 channels, nearest-neighbor upsampling,
/// 3x3 smoothing and a final 1x1 aggregation at 1/4 resolution.
pub struct FpnParams<T = f32> {
    lateral: [ConvParams<T>; 4],
    smooth: ConvParams<T>,
    agg: ConvParams<T>,
}

impl<T: Scalar> FpnParams<T> {
    pub fn init(prefix: &str, spec: &StageSpec, rng: &mut Rng) -> Self {
        let lateral = std::array::from_fn(|s| {
            ConvParams::init(&format!("{prefix}.lat{s}"), COND_CHANNELS, spec.channels[s], 1, 1, 0, rng)
        });
        FpnParams {
            lateral,
            smooth: ConvParams::init(&format!("{prefix}.smooth"), COND_CHANNELS, COND_CHANNELS, 3, 1, 1, rng),
            agg: ConvParams::init(&format!("{prefix}.agg"), COND_CHANNELS, COND_CHANNELS, 1, 1, 0, rng),
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        for l in &self.lateral {
            l.collect(out);
        }
        self.smooth.collect(out);
        self.agg.collect(out);
    }

    pub fn forward(&self, tape: &mut Tape<T>, pyramid: &[NodeId; 4]) -> Result<NodeId> {
        let mut p = self.lateral[3].forward(tape, pyramid[3])?;
        for s in (0..3).rev() {
            let shape = tape.value(pyramid[s]).shape().to_vec();
            let up = tape.resize_nearest(p, shape[1], shape[2])?;
            let lat = self.lateral[s].forward(tape, pyramid[s])?;
            p = tape.add(lat, up)?;
        }
        let sm = self.smooth.forward(tape, p)?;
        self.agg.forward(tape, sm)
    }
}

/// Full conditioning pipeline: two branches, per-stage rectification and
/// fusion, FPN merge.
pub struct Encoder<T = f32> {
    pub spec: StageSpec,
    pub rgb: Branch<T>,
    pub depth: Branch<T>,
    pub frm: Vec<FrmParams<T>>,
    pub ffm: Vec<FfmParams<T>>,
    pub fpn: FpnParams<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(spec: StageSpec, input_hw: usize, rng: &mut Rng) -> Result<Self> {
        let rgb = Branch::init("enc.rgb", &spec, input_hw, rng)?;
        let depth = Branch::init("enc.depth", &spec, input_hw, rng)?;
        let mut frm = Vec::new();
        let mut ffm = Vec::new();
        for s in 0..4 {
            frm.push(FrmParams::init(&format!("enc.frm{s}"), spec.channels[s], rng));
            ffm.push(FfmParams::init(
                &format!("enc.ffm{s}"),
                spec.channels[s],
                32 / DOWNSAMPLE[s],
                rng,
            )?);
        }
        let fpn = FpnParams::init("enc.fpn", &spec, rng);
        Ok(Encoder { spec, rgb, depth, frm, ffm, fpn })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        self.rgb.collect(out);
        self.depth.collect(out);
        for f in &self.frm {
            f.collect(out);
        }
        for f in &self.ffm {
            f.collect(out);
        }
        self.fpn.collect(out);
    }

    /// rgb: [3,h,w]; depth: [1,h,w], already normalized to [0,1] with
    /// invalid pixels at 0. Returns the conditioning map [256, h/4, w/4].
    pub fn forward(&self, tape: &mut Tape<T>, rgb: NodeId, depth: NodeId) -> Result<NodeId> {
        let sd = tape.value(depth).shape().to_vec();
        if sd.len() != 3 || sd[0] != 1 {
            return Err(Error::shape("full_condition", format!("depth must be [1,h,w], got {:?}", sd)));
        }
        // replicate the single depth channel to the 3-channel stem
        let dt = tape.to_tokens(depth)?;
        let d2 = tape.concat_cols(dt, dt)?;
        let d3 = tape.concat_cols(d2, dt)?;
        let depth3 = tape.from_tokens(d3, sd[1], sd[2])?;

        let fr = self.rgb.forward(tape, rgb)?;
        let fd = self.depth.forward(tape, depth3)?;
        let mut fused = [0; 4];
        for s in 0..4 {
            let (r, d) = self.frm[s].forward(tape, fr[s], fd[s])?;
            fused[s] = self.ffm[s].forward(tape, r, d)?;
        }
        self.fpn.forward(tape, &fused)
    }

    pub fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.collect(&mut v);
        v.iter().map(|p| p.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = rng::normal_vec(&mut rng::stream(seed, &[0]), n, 1.0);
        Tensor::new(shape, data.into_iter().map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn branch_shapes_at_64() {
        let spec = StageSpec::tiny();
        let b: Branch<f32> = Branch::init("b", &spec, 64, &mut rng::stream(1, &[0])).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(vec![3, 64, 64], 0.5));
        let feats = b.forward(&mut tape, img).unwrap();
        let want = [[8usize, 16, 16], [16, 8, 8], [32, 4, 4], [64, 2, 2]];
        for (f, w) in feats.iter().zip(&want) {
            assert_eq!(tape.value(*f).shape(), w.as_slice());
        }
    }

    #[test]
    fn branch_rejects_bad_size() {
        let spec = StageSpec::tiny();
        let b: Branch<f32> = Branch::init("b", &spec, 64, &mut rng::stream(1, &[0])).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::zeros(vec![3, 48, 48]));
        assert!(b.forward(&mut tape, img).is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let spec = StageSpec::tiny();
        let b: Branch<f32> = Branch::init("b", &spec, 32, &mut rng::stream(2, &[0])).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::zeros(vec![3, 32, 32]));
        let feats = b.forward(&mut tape, img).unwrap();
        for f in feats {
            assert!(tape.value(f).all_finite());
        }
    }

    #[test]
    fn gradient_reaches_first_layer() {
        let spec = StageSpec::tiny();
        let b: Branch<f32> = Branch::init("b", &spec, 32, &mut rng::stream(3, &[0])).unwrap();
        let mut tape = Tape::new();
        let img = tape.leaf(rand_tensor(vec![3, 32, 32], 4).to_f32());
        let feats = b.forward(&mut tape, img).unwrap();
        let sq = tape.mul(feats[3], feats[3]).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        let g: f32 = b.patch1.w.grad().iter().map(|v| v * v).sum();
        assert!(g > 0.0);
    }

    #[test]
    fn frm_is_identity_at_init() {
        let c = 8;
        let f: FrmParams<f64> = FrmParams::init("f", c, &mut rng::stream(5, &[0]));
        let xr = rand_tensor(vec![c, 4, 4], 6);
        let xd = rand_tensor(vec![c, 4, 4], 7);
        let mut tape = Tape::new();
        let nr = tape.leaf(xr.clone());
        let nd = tape.leaf(xd.clone());
        let (or_, od) = f.forward(&mut tape, nr, nd).unwrap();
        assert_eq!(tape.value(or_).data(), xr.data());
        assert_eq!(tape.value(od).data(), xd.data());
    }

    #[test]
    fn frm_with_zero_depth_leaves_rgb_unchanged() {
        let c = 8;
        let f: FrmParams<f64> = FrmParams::init("f", c, &mut rng::stream(8, &[0]));
        // nonzero gate scales so the corrections are live
        for lam in [&f.lam_c_r, &f.lam_s_r, &f.lam_c_d, &f.lam_s_d] {
            lam.value_mut().data_mut()[0] = 1.0;
        }
        let xr = rand_tensor(vec![c, 4, 4], 9);
        let mut tape = Tape::new();
        let nr = tape.leaf(xr.clone());
        let nd = tape.leaf(Tensor::zeros(vec![c, 4, 4]));
        let (or_, od) = f.forward(&mut tape, nr, nd).unwrap();
        // corrections to rgb multiply depth features, which are zero
        assert_eq!(tape.value(or_).data(), xr.data());
        assert!(tape.value(od).all_finite());
    }

    #[test]
    fn frm_matches_hand_oracle() {
        let (c, h, w) = (4, 2, 3);
        let n = h * w;
        let f: FrmParams<f64> = FrmParams::init("f", c, &mut rng::stream(10, &[0]));
        for (i, lam) in [&f.lam_c_r, &f.lam_s_r, &f.lam_c_d, &f.lam_s_d].iter().enumerate() {
            lam.value_mut().data_mut()[0] = 0.3 + 0.2 * i as f64;
        }
        let xr = rand_tensor(vec![c, h, w], 11);
        let xd = rand_tensor(vec![c, h, w], 12);
        let mut tape = Tape::new();
        let nr = tape.leaf(xr.clone());
        let nd = tape.leaf(xd.clone());
        let (or_, _) = f.forward(&mut tape, nr, nd).unwrap();

        // hand computation of the rgb direction
        let tok = |x: &Tensor<f64>, pos: usize, ch: usize| x.data()[ch * n + pos];
        let gelu = |v: f64| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut gcat = vec![0.0; 2 * c];
        for ch in 0..c {
            gcat[ch] = (0..n).map(|p| tok(&xr, p, ch)).sum::<f64>() / n as f64;
            gcat[c + ch] = (0..n).map(|p| tok(&xd, p, ch)).sum::<f64>() / n as f64;
        }
        let hidden = f.ch_w1_r.shape()[1];
        let mut hv = vec![0.0; hidden];
        for j in 0..hidden {
            let mut s = f.ch_b1_r.value().data()[j];
            for k in 0..2 * c {
                s += gcat[k] * f.ch_w1_r.value().data()[k * hidden + j];
            }
            hv[j] = gelu(s);
        }
        let mut gate = vec![0.0; c];
        for j in 0..c {
            let mut s = f.ch_b2_r.value().data()[j];
            for (k, hk) in hv.iter().enumerate() {
                s += hk * f.ch_w2_r.value().data()[k * c + j];
            }
            gate[j] = sig(s);
        }
        let lc = f.lam_c_r.value().data()[0];
        let ls = f.lam_s_r.value().data()[0];
        for pos in 0..n {
            let mut slog = f.sp_b_r.value().data()[0];
            for ch in 0..c {
                slog += tok(&xr, pos, ch) * f.sp_w_r.value().data()[ch];
                slog += tok(&xd, pos, ch) * f.sp_w_r.value().data()[c + ch];
            }
            let sg = sig(slog);
            for ch in 0..c {
                let want =
                    tok(&xr, pos, ch) + lc * gate[ch] * tok(&xd, pos, ch) + ls * sg * tok(&xd, pos, ch);
                let got = tape.value(or_).data()[ch * n + pos];
                assert!((want - got).abs() < 1e-12, "{} vs {}", want, got);
            }
        }
    }

    #[test]
    fn ffm_at_init_is_projected_concat() {
        let c = 8;
        let f: FfmParams<f64> = FfmParams::init("f", c, 2, &mut rng::stream(13, &[0])).unwrap();
        let x = rand_tensor(vec![c, 4, 4], 14);
        let mut tape = Tape::new();
        let nr = tape.leaf(x.clone());
        let nd = tape.leaf(x.clone());
        let fused = f.forward(&mut tape, nr, nd).unwrap();

        let mut t2 = Tape::new();
        let nr2 = t2.leaf(x.clone());
        let nd2 = t2.leaf(x);
        let tr = t2.to_tokens(nr2).unwrap();
        let td = t2.to_tokens(nd2).unwrap();
        let cat = t2.concat_cols(tr, td).unwrap();
        let fw = t2.param(&f.fuse_w);
        let fb = t2.param(&f.fuse_b);
        let proj = t2.linear(cat, fw, Some(fb)).unwrap();
        let proj = t2.from_tokens(proj, 4, 4).unwrap();
        assert_eq!(tape.value(fused).data(), t2.value(proj).data());
    }

    #[test]
    fn ffm_zero_inputs_finite_and_shapes_per_stage() {
        let spec = StageSpec::tiny();
        for s in 0..4 {
            let c = spec.channels[s];
            let res = 32 / DOWNSAMPLE[s];
            let f: FfmParams<f32> =
                FfmParams::init("f", c, 32 / DOWNSAMPLE[s], &mut rng::stream(15, &[s as u64])).unwrap();
            let mut tape = Tape::new();
            let nr = tape.leaf(Tensor::zeros(vec![c, res, res]));
            let nd = tape.leaf(Tensor::zeros(vec![c, res, res]));
            let fused = f.forward(&mut tape, nr, nd).unwrap();
            assert_eq!(tape.value(fused).shape(), &[c, res, res]);
            assert!(tape.value(fused).all_finite());
        }
    }

    #[test]
    fn fpn_shape_and_zero_finite() {
        let spec = StageSpec::tiny();
        let f: FpnParams<f32> = FpnParams::init("p", &spec, &mut rng::stream(16, &[0]));
        let mut tape = Tape::new();
        let pyr = [
            tape.leaf(Tensor::zeros(vec![8, 16, 16])),
            tape.leaf(Tensor::zeros(vec![16, 8, 8])),
            tape.leaf(Tensor::zeros(vec![32, 4, 4])),
            tape.leaf(Tensor::zeros(vec![64, 2, 2])),
        ];
        let out = f.forward(&mut tape, &pyr).unwrap();
        assert_eq!(tape.value(out).shape(), &[COND_CHANNELS, 16, 16]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn fpn_aggregation_is_linear_in_its_weights() {
        let spec = StageSpec::tiny();
        let f: FpnParams<f64> = FpnParams::init("p", &spec, &mut rng::stream(17, &[0]));
        let mk = |tape: &mut Tape<f64>| {
            [
                tape.leaf(rand_tensor(vec![8, 8, 8], 18)),
                tape.leaf(rand_tensor(vec![16, 4, 4], 19)),
                tape.leaf(rand_tensor(vec![32, 2, 2], 20)),
                tape.leaf(rand_tensor(vec![64, 1, 1], 21)),
            ]
        };
        let mut t1 = Tape::new();
        let pyr = mk(&mut t1);
        let y1 = f.forward(&mut t1, &pyr).unwrap();
        let y1 = t1.value(y1).clone();
        for v in f.agg.w.value_mut().data_mut() {
            *v *= 2.0;
        }
        for v in f.agg.b.value_mut().data_mut() {
            *v *= 2.0;
        }
        let mut t2 = Tape::new();
        let pyr = mk(&mut t2);
        let y2 = f.forward(&mut t2, &pyr).unwrap();
        for (a, b) in y1.data().iter().zip(t2.value(y2).data()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn full_condition_shape_and_determinism() {
        let enc: Encoder<f32> =
            Encoder::init(StageSpec::tiny(), 32, &mut rng::stream(22, &[0])).unwrap();
        let rgb = rand_tensor(vec![3, 32, 32], 23).to_f32();
        let dep = rand_tensor(vec![1, 32, 32], 24).map(|v: f64| (v.abs().min(1.0)) as f32);
        let run = || {
            let mut tape = Tape::new();
            let r = tape.leaf(rgb.clone());
            let d = tape.leaf(dep.clone());
            let c = enc.forward(&mut tape, r, d).unwrap();
            tape.value(c).clone()
        };
        let c1 = run();
        let c2 = run();
        assert_eq!(c1.shape(), &[COND_CHANNELS, 8, 8]);
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn full_condition_gradients_match_finite_differences_on_param_subset() {
        let enc: Encoder<f64> =
            Encoder::init(StageSpec::tiny(), 32, &mut rng::stream(30, &[0])).unwrap();
        // move the zero-initialized scales off their fixed points so their
        // gradient paths are live
        let mut params = Vec::new();
        enc.collect(&mut params);
        for p in &params {
            if p.name().contains("lam_") || p.name().contains(".pw_") || p.name().contains("w_out") {
                let n = p.numel();
                for (i, v) in p.value_mut().data_mut().iter_mut().enumerate() {
                    *v += 0.05 * ((i % 3) as f64 - 1.0) + 0.02 * ((i * 7 % n.max(1)) as f64 / n as f64);
                }
            }
        }
        let rgb = rand_tensor(vec![3, 32, 32], 31);
        let dep = rand_tensor(vec![1, 32, 32], 32).map(|v: f64| v.abs().min(1.0));
        let loss_of = |enc: &Encoder<f64>| -> f64 {
            let mut tape = Tape::new();
            let r = tape.leaf(rgb.clone());
            let d = tape.leaf(dep.clone());
            let c = enc.forward(&mut tape, r, d).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.mean(sq);
            tape.value(loss).item()
        };
        // analytic gradients
        {
            let mut tape = Tape::new();
            let r = tape.leaf(rgb.clone());
            let d = tape.leaf(dep.clone());
            let c = enc.forward(&mut tape, r, d).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.mean(sq);
            tape.backward(loss).unwrap();
        }
        let h = 1e-3;
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        let mut pick = rng::stream(33, &[0]);
        while checked < 50 {
            let pi = (rng::uniform(&mut pick) * params.len() as f64) as usize;
            let p = &params[pi.min(params.len() - 1)];
            let ei = (rng::uniform(&mut pick) * p.numel() as f64) as usize;
            let ei = ei.min(p.numel() - 1);
            let analytic = p.grad()[ei];
            let orig = p.value().data()[ei];
            p.value_mut().data_mut()[ei] = orig + h;
            let up = loss_of(&enc);
            p.value_mut().data_mut()[ei] = orig - h;
            let down = loss_of(&enc);
            p.value_mut().data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            if analytic.abs() < 1e-6 && numeric.abs() < 1e-6 {
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        assert!(max_rel < 1e-2, "max rel err {}", max_rel);
    }
}
