//! Multi-head self-attention and deformable attention blocks.
//!
//! Deformable attention takes queries from every spatial position but keys
//! and values from a small set of sampled points: a uniform reference grid
//! displaced by offsets predicted from the query features. The offset head
//! is zero-initialized, so an untrained layer samples exactly the grid.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sc, NodeId, Param, Scalar, Tape, Tensor};

/// Projection weights for multi-head attention. Channels split equally
/// across heads.
pub struct MhsaParams<T = f32> {
    pub heads: usize,
    pub w_q: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
    pub w_out: Param<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> MhsaParams<T> {
    pub fn init(prefix: &str, channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} channels not divisible by {} heads",
                channels, heads
            )));
        }
        let sq = vec![channels, channels];
        Ok(MhsaParams {
            heads,
            w_q: Param::normal(format!("{prefix}.wq"), sq.clone(), INIT_STD, rng),
            w_k: Param::normal(format!("{prefix}.wk"), sq.clone(), INIT_STD, rng),
            w_v: Param::normal(format!("{prefix}.wv"), sq.clone(), INIT_STD, rng),
            w_out: Param::normal(format!("{prefix}.wo"), sq, INIT_STD, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.w_q.clone(), self.w_k.clone(), self.w_v.clone(), self.w_out.clone()]);
    }

    /// Queries from `q_src` [N,C] attend keys/values from `kv_src` [G,C].
    pub fn attend(&self, tape: &mut Tape<T>, q_src: NodeId, kv_src: NodeId) -> Result<NodeId> {
        let wq = tape.param(&self.w_q);
        let wk = tape.param(&self.w_k);
        let wv = tape.param(&self.w_v);
        let wo = tape.param(&self.w_out);
        let q = tape.matmul(q_src, wq)?;
        let k = tape.matmul(kv_src, wk)?;
        let v = tape.matmul(kv_src, wv)?;
        let z = tape.mha_core(q, k, v, self.heads)?;
        tape.matmul(z, wo)
    }

    /// Self-attention over a token matrix [N,C].
    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        self.attend(tape, x, x)
    }
}

/// Uniform lattice of sample points in normalized [-1,1] coordinates.
/// Rows are [x,y], ordered row-major over (gy,gx).
pub struct ReferenceGrid {
    pub gh: usize,
    pub gw: usize,
    points: Vec<f64>,
}

pub fn reference_points(gh: usize, gw: usize) -> Result<ReferenceGrid> {
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument(format!("grid extents must be >= 1, got {}x{}", gh, gw)));
    }
    let mut points = Vec::with_capacity(gh * gw * 2);
    for gy in 0..gh {
        let y = (2 * gy + 1) as f64 / gh as f64 - 1.0;
        for gx in 0..gw {
            let x = (2 * gx + 1) as f64 / gw as f64 - 1.0;
            points.push(x);
            points.push(y);
        }
    }
    Ok(ReferenceGrid { gh, gw, points })
}

impl ReferenceGrid {
    pub fn len(&self) -> usize {
        self.gh * self.gw
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.len(), 2], self.points.iter().map(|&v| sc(v)).collect())
            .expect("grid tensor shape")
    }
}

/// Offset head: depthwise 3x3 -> GELU -> 1x1 conv to 2 channels, pooled to
/// the grid. The 1x1 layer starts at zero so initial offsets vanish.
pub struct OffsetNet<T = f32> {
    pub dw_w: Param<T>,
    pub dw_b: Param<T>,
    pub pw_w: Param<T>,
    pub pw_b: Param<T>,
}

impl<T: Scalar> OffsetNet<T> {
    pub fn init(prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        OffsetNet {
            dw_w: Param::normal(format!("{prefix}.dw_w"), vec![channels, 3, 3], INIT_STD, rng),
            dw_b: Param::zeros(format!("{prefix}.dw_b"), vec![channels]),
            pw_w: Param::zeros(format!("{prefix}.pw_w"), vec![2, channels, 1, 1]),
            pw_b: Param::zeros(format!("{prefix}.pw_b"), vec![2]),
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.dw_w.clone(), self.dw_b.clone(), self.pw_w.clone(), self.pw_b.clone()]);
    }
}

pub struct DeformParams<T = f32> {
    pub attn: MhsaParams<T>,
    pub offset: OffsetNet<T>,
    pub grid: ReferenceGrid,
}

impl<T: Scalar> DeformParams<T> {
    pub fn init(
        prefix: &str,
        channels: usize,
        heads: usize,
        gh: usize,
        gw: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(DeformParams {
            attn: MhsaParams::init(prefix, channels, heads, rng)?,
            offset: OffsetNet::init(&format!("{prefix}.off"), channels, rng),
            grid: reference_points(gh, gw)?,
        })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        self.attn.collect(out);
        self.offset.collect(out);
    }

    /// Sample locations [G,2] for a query feature map [C,H,W]: reference
    /// grid plus predicted offsets, each bounded to one grid cell by tanh.
    fn points_from_query_map(&self, tape: &mut Tape<T>, q_map: NodeId) -> Result<NodeId> {
        let dw_w = tape.param(&self.offset.dw_w);
        let dw_b = tape.param(&self.offset.dw_b);
        let pw_w = tape.param(&self.offset.pw_w);
        let pw_b = tape.param(&self.offset.pw_b);
        let h1 = tape.depthwise3x3(q_map, dw_w, dw_b)?;
        let h1 = tape.gelu(h1);
        let raw = tape.conv2d(h1, pw_w, Some(pw_b), 1, 0)?;
        let pooled = tape.avg_pool(raw, self.grid.gh, self.grid.gw)?;
        let tok = tape.to_tokens(pooled)?;
        let bounded = tape.tanh_op(tok);
        let cell = Tensor::new(
            vec![2],
            vec![sc(2.0 / self.grid.gw as f64), sc(2.0 / self.grid.gh as f64)],
        )?;
        let cell = tape.leaf(cell);
        let scaled = tape.row_broadcast_mul(bounded, cell)?;
        let base = tape.leaf(self.grid.tensor());
        tape.add(base, scaled)
    }

    /// Deformed sample points for an input map, for inspection/overlays.
    pub fn sample_points(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let xt = tape.to_tokens(x)?;
        let wq = tape.param(&self.attn.w_q);
        let q = tape.matmul(xt, wq)?;
        let q_map = tape.from_tokens(q, h, w)?;
        self.points_from_query_map(tape, q_map)
    }

    /// Queries from every position of `x` [C,H,W], keys/values from the
    /// deformed sample set shared across queries.
    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("deform_attend", format!("expected [C,H,W], got {:?}", shape)));
        }
        let (h, w) = (shape[1], shape[2]);
        let xt = tape.to_tokens(x)?;
        let wq = tape.param(&self.attn.w_q);
        let q = tape.matmul(xt, wq)?;
        let q_map = tape.from_tokens(q, h, w)?;
        let points = self.points_from_query_map(tape, q_map)?;
        let sampled = tape.bilinear_sample(x, points)?;
        let wk = tape.param(&self.attn.w_k);
        let wv = tape.param(&self.attn.w_v);
        let wo = tape.param(&self.attn.w_out);
        let k = tape.matmul(sampled, wk)?;
        let v = tape.matmul(sampled, wv)?;
        let z = tape.mha_core(q, k, v, self.attn.heads)?;
        let out = tape.matmul(z, wo)?;
        tape.from_tokens(out, h, w)
    }
}

/// Pre-norm transformer block: deformable attention + residual, then
/// MLP + residual. Shape-preserving on [C,H,W].
pub struct DatBlockParams<T = f32> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub deform: DeformParams<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub mlp_w1: Param<T>,
    pub mlp_b1: Param<T>,
    pub mlp_w2: Param<T>,
    pub mlp_b2: Param<T>,
}

impl<T: Scalar> DatBlockParams<T> {
    pub fn init(
        prefix: &str,
        channels: usize,
        heads: usize,
        gh: usize,
        gw: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = channels * mlp_ratio;
        Ok(DatBlockParams {
            ln1_g: Param::ones(format!("{prefix}.ln1_g"), vec![channels]),
            ln1_b: Param::zeros(format!("{prefix}.ln1_b"), vec![channels]),
            deform: DeformParams::init(&format!("{prefix}.attn"), channels, heads, gh, gw, rng)?,
            ln2_g: Param::ones(format!("{prefix}.ln2_g"), vec![channels]),
            ln2_b: Param::zeros(format!("{prefix}.ln2_b"), vec![channels]),
            mlp_w1: Param::normal(format!("{prefix}.mlp_w1"), vec![channels, hidden], INIT_STD, rng),
            mlp_b1: Param::zeros(format!("{prefix}.mlp_b1"), vec![hidden]),
            mlp_w2: Param::normal(format!("{prefix}.mlp_w2"), vec![hidden, channels], INIT_STD, rng),
            mlp_b2: Param::zeros(format!("{prefix}.mlp_b2"), vec![channels]),
        })
    }

    pub fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.ln1_g.clone(), self.ln1_b.clone()]);
        self.deform.collect(out);
        out.extend([
            self.ln2_g.clone(),
            self.ln2_b.clone(),
            self.mlp_w1.clone(),
            self.mlp_b1.clone(),
            self.mlp_w2.clone(),
            self.mlp_b2.clone(),
        ]);
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let t = tape.to_tokens(x)?;

        let g1 = tape.param(&self.ln1_g);
        let b1 = tape.param(&self.ln1_b);
        let n1 = tape.layer_norm(t, g1, b1)?;
        let n1_map = tape.from_tokens(n1, h, w)?;
        let a_map = self.deform.forward(tape, n1_map)?;
        let a_t = tape.to_tokens(a_map)?;
        let t2 = tape.add(t, a_t)?;

        let g2 = tape.param(&self.ln2_g);
        let b2 = tape.param(&self.ln2_b);
        let n2 = tape.layer_norm(t2, g2, b2)?;
        let w1 = tape.param(&self.mlp_w1);
        let bb1 = tape.param(&self.mlp_b1);
        let m1 = tape.linear(n2, w1, Some(bb1))?;
        let m1 = tape.gelu(m1);
        let w2 = tape.param(&self.mlp_w2);
        let bb2 = tape.param(&self.mlp_b2);
        let m2 = tape.linear(m1, w2, Some(bb2))?;
        let t3 = tape.add(t2, m2)?;
        tape.from_tokens(t3, h, w)
    }
}
