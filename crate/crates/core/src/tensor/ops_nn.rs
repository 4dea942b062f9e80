//! Linear algebra and neural-net ops: matmul, activations, softmax,
//! layer norm, cross entropy, embeddings and fused attention kernels.

use super::tape::{GradStore, NodeId, Op, Tape};
use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

pub(super) enum NnOp<T> {
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Gelu { x: NodeId },
    Softmax { x: NodeId, outer: usize, len: usize, inner: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, outer: usize, len: usize, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, ignore: u32, probs: Vec<T>, count: usize },
    Embedding { table: NodeId, ids: Vec<u32>, d: usize },
    MhaCore { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    DeformPointAttend { sampled: NodeId, weights: NodeId, heads: usize, points: usize },
}

impl<T> NnOp<T> {
    // Used by the debug-build finiteness assertion in tape.rs.
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    pub fn name(&self) -> &'static str {
        match self {
            NnOp::Matmul { .. } => "matmul",
            NnOp::Sigmoid { .. } => "sigmoid",
            NnOp::Tanh { .. } => "tanh",
            NnOp::Gelu { .. } => "gelu",
            NnOp::Softmax { .. } => "softmax",
            NnOp::LayerNorm { .. } => "layer_norm",
            NnOp::CrossEntropy { .. } => "cross_entropy",
            NnOp::Embedding { .. } => "embedding",
            NnOp::MhaCore { .. } => "mha_core",
            NnOp::DeformPointAttend { .. } => "deform_point_attend",
        }
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let c: T = sc(GELU_C);
    let k: T = sc((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + c * x * x * x);
    sc::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c: T = sc(GELU_C);
    let k: T = sc((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = k * (T::one() + sc::<T>(3.0) * c * x * x);
    sc::<T>(0.5) * (T::one() + t) + sc::<T>(0.5) * x * sech2 * du
}

impl<T: Scalar> Tape<T> {
    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Nn(NnOp::Matmul { a, b, m, k, n })))
    }

    /// x @ w + bias convenience for token matrices.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.row_broadcast_add(y, b),
            None => Ok(y),
        }
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor { shape: vx.shape().to_vec(), data };
        self.push(value, Op::Nn(NnOp::Sigmoid { x }))
    }

    pub fn tanh_op(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor { shape: vx.shape().to_vec(), data };
        self.push(value, Op::Nn(NnOp::Tanh { x }))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_val(v)).collect();
        let value = Tensor { shape: vx.shape().to_vec(), data };
        self.push(value, Op::Nn(NnOp::Gelu { x }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax axis {} out of range for {:?}", axis, shape)));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    total = total + e;
                }
                for l in 0..len {
                    data[base + l * inner] = data[base + l * inner] / total;
                }
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Nn(NnOp::Softmax { x, outer, len, inner })))
    }

    /// Layer norm over the last axis with affine gain/bias, eps = 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("layer_norm", "empty shape"))?;
        if self.value(gain).numel() != len || self.value(bias).numel() != len {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have {} elements", len),
            ));
        }
        let outer = self.value(x).numel() / len;
        let eps: T = sc(1e-5);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer];
        let inv_len: T = sc(1.0 / len as f64);
        for o in 0..outer {
            let row = &src[o * len..(o + 1) * len];
            let mean = row.iter().copied().sum::<T>() * inv_len;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let r = T::one() / (var + eps).sqrt();
            rstd[o] = r;
            for l in 0..len {
                let xh = (row[l] - mean) * r;
                xhat[o * len + l] = xh;
                data[o * len + l] = xh * g[l] + b[l];
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Nn(NnOp::LayerNorm { x, gain, bias, outer, len, xhat, rstd })))
    }

    /// Mean negative log-softmax over non-ignored positions.
    ///
    /// `logits` is a [N, K] token matrix; targets are per-row class ids.
    /// All-ignored input yields loss 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], ignore: u32) -> Result<NodeId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", shape, targets.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        for &t in targets {
            if t != ignore && t as usize >= k {
                return Err(Error::InvalidArgument(format!("target id {} >= {} classes", t, k)));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        let mut count = 0usize;
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..k {
                let e = (row[c] - mx).exp();
                probs[r * k + c] = e;
                total = total + e;
            }
            for c in 0..k {
                probs[r * k + c] = probs[r * k + c] / total;
            }
            let t = targets[r];
            if t != ignore {
                count += 1;
                let p = probs[r * k + t as usize].max(T::min_positive_value());
                loss = loss - p.ln();
            }
        }
        if count > 0 {
            loss = loss / sc(count as f64);
        }
        let op = NnOp::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count };
        Ok(self.push(Tensor::scalar(loss), Op::Nn(op)))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be [K,D], got {:?}", shape)));
        }
        let (k, d) = (shape[0], shape[1]);
        for &id in ids {
            if id as usize >= k {
                return Err(Error::InvalidArgument(format!("embedding id {} >= {}", id, k)));
            }
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let value = Tensor { shape: vec![ids.len(), d], data };
        Ok(self.push(value, Op::Nn(NnOp::Embedding { table, ids: ids.to_vec(), d })))
    }

    /// Scaled dot-product attention with per-head softmax.
    ///
    /// q: [N, C], k/v: [G, C], C divisible by `heads`. Projections and the
    /// output matrix live outside this op.
    pub fn mha_core(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, sk, sv) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(Error::shape("mha_core", format!("q {:?}, k {:?}, v {:?}", sq, sk, sv)));
        }
        let c = sq[1];
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("mha_core", format!("{} channels not divisible by {} heads", c, heads)));
        }
        let (n, g) = (sq[0], sk[0]);
        let d = c / heads;
        let scale: T = sc(1.0 / (d as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * n * g];
        let mut out = vec![T::zero(); n * c];
        for h in 0..heads {
            let off = h * d;
            let p = &mut probs[h * n * g..(h + 1) * n * g];
            // scores = scale * Qh x Kh^T
            T::gemm_strided(
                n, d, g, scale,
                &qd[off..], c as isize, 1,
                &kd[off..], 1, c as isize,
                T::zero(),
                p, g as isize, 1,
            );
            for r in 0..n {
                let row = &mut p[r * g..(r + 1) * g];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                    total = total + *e;
                }
                for e in row.iter_mut() {
                    *e = *e / total;
                }
            }
            // Zh = P x Vh
            T::gemm_strided(
                n, g, d, T::one(),
                p, g as isize, 1,
                &vd[off..], c as isize, 1,
                T::zero(),
                &mut out[off..], c as isize, 1,
            );
        }
        let value = Tensor { shape: vec![n, c], data: out };
        Ok(self.push(value, Op::Nn(NnOp::MhaCore { q, k, v, heads, probs })))
    }

    /// Weighted sum of pre-sampled per-point features, deformable-DETR style.
    ///
    /// sampled: [N*H*P, C] (query-major, then head, then point); weights:
    /// [N, H*P], already softmaxed over points. Head h reads its channel
    /// slice of size C/H.
    pub fn deform_point_attend(
        &mut self,
        sampled: NodeId,
        weights: NodeId,
        heads: usize,
        points: usize,
    ) -> Result<NodeId> {
        let (ss, sw) = (self.value(sampled).shape().to_vec(), self.value(weights).shape().to_vec());
        if ss.len() != 2 || sw.len() != 2 || sw[1] != heads * points || ss[0] != sw[0] * heads * points {
            return Err(Error::shape(
                "deform_point_attend",
                format!("sampled {:?}, weights {:?}, heads {}, points {}", ss, sw, heads, points),
            ));
        }
        let c = ss[1];
        if c % heads != 0 {
            return Err(Error::shape("deform_point_attend", format!("{} channels, {} heads", c, heads)));
        }
        let n = sw[0];
        let d = c / heads;
        let sd = self.value(sampled).data();
        let wd = self.value(weights).data();
        let mut out = vec![T::zero(); n * c];
        for q in 0..n {
            for h in 0..heads {
                for p in 0..points {
                    let w = wd[q * heads * points + h * points + p];
                    let row = (q * heads + h) * points + p;
                    for j in 0..d {
                        let idx = q * c + h * d + j;
                        out[idx] = out[idx] + w * sd[row * c + h * d + j];
                    }
                }
            }
        }
        let value = Tensor { shape: vec![n, c], data: out };
        Ok(self.push(value, Op::Nn(NnOp::DeformPointAttend { sampled, weights, heads, points })))
    }
}

pub(super) fn backward<T: Scalar>(
    tape: &Tape<T>,
    op: &NnOp<T>,
    out: &Tensor<T>,
    og: &[T],
    grads: &mut GradStore<T>,
) {
    match op {
        NnOp::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            {
                // dA = dC x B^T
                let vb = tape.value(*b).data();
                let ga = grads.acc(*a, m * k);
                T::gemm_strided(m, n, k, T::one(), og, n as isize, 1, vb, 1, n as isize, T::one(), ga, k as isize, 1);
            }
            // dB = A^T x dC
            let va = tape.value(*a).data();
            let gb = grads.acc(*b, k * n);
            T::gemm_strided(k, m, n, T::one(), va, 1, k as isize, og, n as isize, 1, T::one(), gb, n as isize, 1);
        }
        NnOp::Sigmoid { x } => {
            let y = out.data();
            let gx = grads.acc(*x, y.len());
            for i in 0..y.len() {
                gx[i] = gx[i] + og[i] * y[i] * (T::one() - y[i]);
            }
        }
        NnOp::Tanh { x } => {
            let y = out.data();
            let gx = grads.acc(*x, y.len());
            for i in 0..y.len() {
                gx[i] = gx[i] + og[i] * (T::one() - y[i] * y[i]);
            }
        }
        NnOp::Gelu { x } => {
            let vx = tape.value(*x).data();
            let gx = grads.acc(*x, vx.len());
            for i in 0..vx.len() {
                gx[i] = gx[i] + og[i] * gelu_grad(vx[i]);
            }
        }
        NnOp::Softmax { x, outer, len, inner } => {
            let p = out.data();
            let gx = grads.acc(*x, p.len());
            for o in 0..*outer {
                for i in 0..*inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for l in 0..*len {
                        let idx = base + l * inner;
                        dot = dot + p[idx] * og[idx];
                    }
                    for l in 0..*len {
                        let idx = base + l * inner;
                        gx[idx] = gx[idx] + p[idx] * (og[idx] - dot);
                    }
                }
            }
        }
        NnOp::LayerNorm { x, gain, bias, outer, len, xhat, rstd } => {
            let g = tape.value(*gain).data();
            let inv_len: T = sc(1.0 / *len as f64);
            {
                let gx = grads.acc(*x, outer * len);
                for o in 0..*outer {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for l in 0..*len {
                        let idx = o * len + l;
                        let dxhat = og[idx] * g[l];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat[idx];
                    }
                    for l in 0..*len {
                        let idx = o * len + l;
                        let dxhat = og[idx] * g[l];
                        gx[idx] = gx[idx]
                            + rstd[o] * (dxhat - inv_len * sum_dxhat - xhat[idx] * inv_len * sum_dxhat_xhat);
                    }
                }
            }
            {
                let gg = grads.acc(*gain, *len);
                for o in 0..*outer {
                    for l in 0..*len {
                        gg[l] = gg[l] + og[o * len + l] * xhat[o * len + l];
                    }
                }
            }
            let gb = grads.acc(*bias, *len);
            for o in 0..*outer {
                for l in 0..*len {
                    gb[l] = gb[l] + og[o * len + l];
                }
            }
        }
        NnOp::CrossEntropy { logits, targets, ignore, probs, count } => {
            if *count == 0 {
                // all positions ignored: zero gradient, but still defined
                grads.acc(*logits, probs.len());
                return;
            }
            let k = probs.len() / targets.len();
            let w = og[0] / sc(*count as f64);
            let gl = grads.acc(*logits, probs.len());
            for (r, &t) in targets.iter().enumerate() {
                if t == *ignore {
                    continue;
                }
                for c in 0..k {
                    let idx = r * k + c;
                    let onehot = if c == t as usize { T::one() } else { T::zero() };
                    gl[idx] = gl[idx] + w * (probs[idx] - onehot);
                }
            }
        }
        NnOp::Embedding { table, ids, d } => {
            let gt = grads.acc(*table, tape.value(*table).numel());
            for (r, &id) in ids.iter().enumerate() {
                let dst = id as usize * d;
                for j in 0..*d {
                    gt[dst + j] = gt[dst + j] + og[r * d + j];
                }
            }
        }
        NnOp::MhaCore { q, k, v, heads, probs } => {
            let c = tape.value(*q).shape()[1];
            let n = tape.value(*q).shape()[0];
            let g = tape.value(*k).shape()[0];
            let d = c / heads;
            let scale: T = sc(1.0 / (d as f64).sqrt());
            let qd = tape.value(*q).data();
            let kd = tape.value(*k).data();
            let vd = tape.value(*v).data();
            let mut dq = vec![T::zero(); n * c];
            let mut dk = vec![T::zero(); g * c];
            let mut dv = vec![T::zero(); g * c];
            let mut dp = vec![T::zero(); n * g];
            let mut ds = vec![T::zero(); n * g];
            for h in 0..*heads {
                let off = h * d;
                let p = &probs[h * n * g..(h + 1) * n * g];
                // dVh += P^T x dZh
                T::gemm_strided(
                    g, n, d, T::one(),
                    p, 1, g as isize,
                    &og[off..], c as isize, 1,
                    T::one(),
                    &mut dv[off..], c as isize, 1,
                );
                // dP = dZh x Vh^T
                T::gemm_strided(
                    n, d, g, T::one(),
                    &og[off..], c as isize, 1,
                    &vd[off..], 1, c as isize,
                    T::zero(),
                    &mut dp, g as isize, 1,
                );
                // dS = P o (dP - rowsum(dP o P))
                for r in 0..n {
                    let mut dot = T::zero();
                    for j in 0..g {
                        dot = dot + dp[r * g + j] * p[r * g + j];
                    }
                    for j in 0..g {
                        ds[r * g + j] = p[r * g + j] * (dp[r * g + j] - dot);
                    }
                }
                // dQh += scale * dS x Kh ; dKh += scale * dS^T x Qh
                T::gemm_strided(
                    n, g, d, scale,
                    &ds, g as isize, 1,
                    &kd[off..], c as isize, 1,
                    T::one(),
                    &mut dq[off..], c as isize, 1,
                );
                T::gemm_strided(
                    g, n, d, scale,
                    &ds, 1, g as isize,
                    &qd[off..], c as isize, 1,
                    T::one(),
                    &mut dk[off..], c as isize, 1,
                );
            }
            {
                let gq = grads.acc(*q, n * c);
                for i in 0..gq.len() {
                    gq[i] = gq[i] + dq[i];
                }
            }
            {
                let gk = grads.acc(*k, g * c);
                for i in 0..gk.len() {
                    gk[i] = gk[i] + dk[i];
                }
            }
            let gv = grads.acc(*v, g * c);
            for i in 0..gv.len() {
                gv[i] = gv[i] + dv[i];
            }
        }
        NnOp::DeformPointAttend { sampled, weights, heads, points } => {
            let c = tape.value(*sampled).shape()[1];
            let n = tape.value(*weights).shape()[0];
            let d = c / heads;
            let sd = tape.value(*sampled).data();
            let wd = tape.value(*weights).data();
            {
                let gs = grads.acc(*sampled, tape.value(*sampled).numel());
                for q in 0..n {
                    for h in 0..*heads {
                        for p in 0..*points {
                            let w = wd[q * heads * points + h * points + p];
                            let row = (q * heads + h) * points + p;
                            for j in 0..d {
                                gs[row * c + h * d + j] = gs[row * c + h * d + j] + w * og[q * c + h * d + j];
                            }
                        }
                    }
                }
            }
            let gw = grads.acc(*weights, n * heads * points);
            for q in 0..n {
                for h in 0..*heads {
                    for p in 0..*points {
                        let row = (q * heads + h) * points + p;
                        let mut acc = T::zero();
                        for j in 0..d {
                            acc = acc + sd[row * c + h * d + j] * og[q * c + h * d + j];
                        }
                        let widx = q * heads * points + h * points + p;
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
}
