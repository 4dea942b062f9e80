//! Elementwise, broadcast, shape and reduction ops.

use super::tape::{GradStore, NodeId, Op, Tape};
use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

pub(super) enum BasicOp<T> {
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// a * x + b with scalar constants.
    Affine { x: NodeId, a: T },
    /// x * s where s is a one-element node (learnable gate).
    MulScalarNode { x: NodeId, s: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Reshape { x: NodeId },
    /// out[c, r] = in[r, c] for a [rows, cols] input.
    Transpose2 { x: NodeId, rows: usize, cols: usize },
    /// [N, ca] ++ [N, cb] -> [N, ca+cb]
    ConcatCols { a: NodeId, b: NodeId, ca: usize, cb: usize, rows: usize },
    /// [N, C] + [C]
    RowBroadcastAdd { x: NodeId, b: NodeId, cols: usize },
    /// [N, C] * [C]
    RowBroadcastMul { x: NodeId, g: NodeId, cols: usize },
    /// [N, C] * [N]
    ColBroadcastMul { x: NodeId, s: NodeId, cols: usize },
}

impl<T> BasicOp<T> {
    // Used by the debug-build finiteness assertion in tape.rs.
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    pub fn name(&self) -> &'static str {
        match self {
            BasicOp::Add { .. } => "add",
            BasicOp::Sub { .. } => "sub",
            BasicOp::Mul { .. } => "mul",
            BasicOp::Affine { .. } => "affine",
            BasicOp::MulScalarNode { .. } => "mul_scalar_node",
            BasicOp::Sum { .. } => "sum",
            BasicOp::Mean { .. } => "mean",
            BasicOp::Reshape { .. } => "reshape",
            BasicOp::Transpose2 { .. } => "transpose2",
            BasicOp::ConcatCols { .. } => "concat_cols",
            BasicOp::RowBroadcastAdd { .. } => "row_broadcast_add",
            BasicOp::RowBroadcastMul { .. } => "row_broadcast_mul",
            BasicOp::ColBroadcastMul { .. } => "col_broadcast_mul",
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Basic(BasicOp::Add { a, b })))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Basic(BasicOp::Sub { a, b })))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Basic(BasicOp::Mul { a, b })))
    }

    /// a * x + b elementwise with constants.
    pub fn affine(&mut self, x: NodeId, a: T, b: T) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| a * v + b).collect();
        let value = Tensor { shape: vx.shape().to_vec(), data };
        self.push(value, Op::Basic(BasicOp::Affine { x, a }))
    }

    pub fn scale(&mut self, x: NodeId, a: T) -> NodeId {
        self.affine(x, a, T::zero())
    }

    /// Multiply by a one-element node (e.g. a learnable blend factor).
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar_node", "scale node must have one element"));
        }
        let sv = self.value(s).data()[0];
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sv).collect();
        let value = Tensor { shape: vx.shape().to_vec(), data };
        Ok(self.push(value, Op::Basic(BasicOp::MulScalarNode { x, s })))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Basic(BasicOp::Sum { x }))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total / sc(n as f64)), Op::Basic(BasicOp::Mean { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Basic(BasicOp::Reshape { x })))
    }

    /// Transpose a 2-D view [rows, cols] -> [cols, rows].
    pub fn transpose2(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.numel() != rows * cols {
            return Err(Error::shape("transpose2", format!("{} != {}x{}", vx.numel(), rows, cols)));
        }
        let src = vx.data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor { shape: vec![cols, rows], data };
        Ok(self.push(value, Op::Basic(BasicOp::Transpose2 { x, rows, cols })))
    }

    /// [C, H, W] feature map to [H*W, C] token matrix.
    pub fn to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("to_tokens", format!("expected [C,H,W], got {:?}", shape)));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        self.transpose2(x, c, h * w)
    }

    /// [H*W, C] token matrix back to a [C, H, W] feature map.
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::shape("from_tokens", format!("expected [{}x{}, C], got {:?}", h, w, shape)));
        }
        let c = shape[1];
        let t = self.transpose2(x, h * w, c)?;
        self.reshape(t, vec![c, h, w])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", sa, sb)));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let value = Tensor { shape: vec![rows, ca + cb], data };
        Ok(self.push(value, Op::Basic(BasicOp::ConcatCols { a, b, ca, cb, rows })))
    }

    pub fn row_broadcast_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(b).shape().to_vec());
        let cols = *sx.last().ok_or_else(|| Error::shape("row_broadcast_add", "empty shape"))?;
        if sb.iter().product::<usize>() != cols {
            return Err(Error::shape("row_broadcast_add", format!("{:?} + {:?}", sx, sb)));
        }
        let (vx, vb) = (self.value(x).data(), self.value(b).data());
        let data = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % cols])
            .collect();
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::Basic(BasicOp::RowBroadcastAdd { x, b, cols })))
    }

    pub fn row_broadcast_mul(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.value(x).shape().to_vec(), self.value(g).shape().to_vec());
        let cols = *sx.last().ok_or_else(|| Error::shape("row_broadcast_mul", "empty shape"))?;
        if sg.iter().product::<usize>() != cols {
            return Err(Error::shape("row_broadcast_mul", format!("{:?} * {:?}", sx, sg)));
        }
        let (vx, vg) = (self.value(x).data(), self.value(g).data());
        let data = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vg[i % cols])
            .collect();
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::Basic(BasicOp::RowBroadcastMul { x, g, cols })))
    }

    pub fn col_broadcast_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("col_broadcast_mul", format!("expected 2-D, got {:?}", sx)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        if self.value(s).numel() != rows {
            return Err(Error::shape("col_broadcast_mul", format!("{:?} * len {}", sx, self.value(s).numel())));
        }
        let (vx, vs) = (self.value(x).data(), self.value(s).data());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(vx[r * cols + c] * vs[r]);
            }
        }
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::Basic(BasicOp::ColBroadcastMul { x, s, cols })))
    }
}

pub(super) fn backward<T: Scalar>(
    tape: &Tape<T>,
    op: &BasicOp<T>,
    _out: &Tensor<T>,
    og: &[T],
    grads: &mut GradStore<T>,
) {
    match op {
        BasicOp::Add { a, b } => {
            let n = tape.value(*a).numel();
            let ga = grads.acc(*a, n);
            for (d, s) in ga.iter_mut().zip(og) {
                *d = *d + *s;
            }
            let gb = grads.acc(*b, n);
            for (d, s) in gb.iter_mut().zip(og) {
                *d = *d + *s;
            }
        }
        BasicOp::Sub { a, b } => {
            let n = tape.value(*a).numel();
            let ga = grads.acc(*a, n);
            for (d, s) in ga.iter_mut().zip(og) {
                *d = *d + *s;
            }
            let gb = grads.acc(*b, n);
            for (d, s) in gb.iter_mut().zip(og) {
                *d = *d - *s;
            }
        }
        BasicOp::Mul { a, b } => {
            let n = tape.value(*a).numel();
            {
                let vb = tape.value(*b).data().to_vec();
                let ga = grads.acc(*a, n);
                for i in 0..n {
                    ga[i] = ga[i] + og[i] * vb[i];
                }
            }
            let va = tape.value(*a).data().to_vec();
            let gb = grads.acc(*b, n);
            for i in 0..n {
                gb[i] = gb[i] + og[i] * va[i];
            }
        }
        BasicOp::Affine { x, a } => {
            let n = tape.value(*x).numel();
            let gx = grads.acc(*x, n);
            for i in 0..n {
                gx[i] = gx[i] + og[i] * *a;
            }
        }
        BasicOp::MulScalarNode { x, s } => {
            let n = tape.value(*x).numel();
            let sv = tape.value(*s).data()[0];
            {
                let gx = grads.acc(*x, n);
                for i in 0..n {
                    gx[i] = gx[i] + og[i] * sv;
                }
            }
            let vx = tape.value(*x).data();
            let mut acc = T::zero();
            for i in 0..n {
                acc = acc + og[i] * vx[i];
            }
            let gs = grads.acc(*s, 1);
            gs[0] = gs[0] + acc;
        }
        BasicOp::Sum { x } => {
            let n = tape.value(*x).numel();
            let gx = grads.acc(*x, n);
            for g in gx.iter_mut() {
                *g = *g + og[0];
            }
        }
        BasicOp::Mean { x } => {
            let n = tape.value(*x).numel();
            let w = og[0] / sc(n.max(1) as f64);
            let gx = grads.acc(*x, n);
            for g in gx.iter_mut() {
                *g = *g + w;
            }
        }
        BasicOp::Reshape { x } => {
            let n = tape.value(*x).numel();
            let gx = grads.acc(*x, n);
            for (d, s) in gx.iter_mut().zip(og) {
                *d = *d + *s;
            }
        }
        BasicOp::Transpose2 { x, rows, cols } => {
            let gx = grads.acc(*x, rows * cols);
            for r in 0..*rows {
                for c in 0..*cols {
                    gx[r * cols + c] = gx[r * cols + c] + og[c * rows + r];
                }
            }
        }
        BasicOp::ConcatCols { a, b, ca, cb, rows } => {
            let stride = ca + cb;
            {
                let ga = grads.acc(*a, rows * ca);
                for r in 0..*rows {
                    for c in 0..*ca {
                        ga[r * ca + c] = ga[r * ca + c] + og[r * stride + c];
                    }
                }
            }
            let gb = grads.acc(*b, rows * cb);
            for r in 0..*rows {
                for c in 0..*cb {
                    gb[r * cb + c] = gb[r * cb + c] + og[r * stride + ca + c];
                }
            }
        }
        BasicOp::RowBroadcastAdd { x, b, cols } => {
            let n = tape.value(*x).numel();
            {
                let gx = grads.acc(*x, n);
                for (d, s) in gx.iter_mut().zip(og) {
                    *d = *d + *s;
                }
            }
            let gb = grads.acc(*b, *cols);
            for (i, s) in og.iter().enumerate() {
                gb[i % cols] = gb[i % cols] + *s;
            }
        }
        BasicOp::RowBroadcastMul { x, g, cols } => {
            let n = tape.value(*x).numel();
            {
                let vg = tape.value(*g).data().to_vec();
                let gx = grads.acc(*x, n);
                for i in 0..n {
                    gx[i] = gx[i] + og[i] * vg[i % cols];
                }
            }
            let vx = tape.value(*x).data();
            let gg = grads.acc(*g, *cols);
            for i in 0..n {
                gg[i % cols] = gg[i % cols] + og[i] * vx[i];
            }
        }
        BasicOp::ColBroadcastMul { x, s, cols } => {
            let n = tape.value(*x).numel();
            let rows = n / cols;
            {
                let vs = tape.value(*s).data().to_vec();
                let gx = grads.acc(*x, n);
                for r in 0..rows {
                    for c in 0..*cols {
                        gx[r * cols + c] = gx[r * cols + c] + og[r * cols + c] * vs[r];
                    }
                }
            }
            let vx = tape.value(*x).data();
            let gs = grads.acc(*s, rows);
            for r in 0..rows {
                let mut acc = T::zero();
                for c in 0..*cols {
                    acc = acc + og[r * cols + c] * vx[r * cols + c];
                }
                gs[r] = gs[r] + acc;
            }
        }
    }
}
