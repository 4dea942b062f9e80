//! Ops over [C, H, W] feature maps: convolutions, pooling, resizing and
//! bilinear point sampling.

use super::tape::{GradStore, NodeId, Op, Tape};
use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

pub(super) enum SpatialOp<T> {
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
        col: Vec<T>,
    },
    Depthwise3x3 { x: NodeId, w: NodeId, b: NodeId, c: usize, h: usize, wd: usize },
    AvgPool { x: NodeId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    ResizeBilinear { x: NodeId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    ResizeNearest { x: NodeId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    BilinearSample { feat: NodeId, points: NodeId, c: usize, h: usize, w: usize, n: usize },
}

#[derive(Clone, Copy)]
pub(super) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl<T> SpatialOp<T> {
    // Used by the debug-build finiteness assertion in tape.rs.
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    pub fn name(&self) -> &'static str {
        match self {
            SpatialOp::Conv2d { .. } => "conv2d",
            SpatialOp::Depthwise3x3 { .. } => "depthwise3x3",
            SpatialOp::AvgPool { .. } => "avg_pool",
            SpatialOp::ResizeBilinear { .. } => "resize_bilinear",
            SpatialOp::ResizeNearest { .. } => "resize_nearest",
            SpatialOp::BilinearSample { .. } => "bilinear_sample",
        }
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let kdim = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut col = vec![T::zero(); kdim * ohw];
    for ci in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let krow = (ci * d.kh + ky) * d.kw + kx;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        col[krow * ohw + oy * d.ow + ox] =
                            x[(ci * d.h + iy as usize) * d.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Source coordinate and interpolation weight pair for align-corners resize.
fn resize_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if dst_len <= 1 || src_len <= 1 {
        let mid = if dst_len <= 1 { (src_len - 1) as f64 / 2.0 } else { 0.0 };
        let i0 = mid.floor() as usize;
        let frac = mid - i0 as f64;
        let i1 = (i0 + 1).min(src_len - 1);
        return (i0, i1, frac);
    }
    let s = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of [Cin,H,W] with [Cout,Cin,kh,kw], kh/kw in {1,3}.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        if sx[0] != sw[1] {
            return Err(Error::shape("conv2d", format!("{} input channels vs kernel {:?}", sx[0], sw)));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if !(kh == 1 || kh == 3) || !(kw == 1 || kw == 3) {
            return Err(Error::InvalidArgument(format!("conv2d kernel must be 1 or 3, got {}x{}", kh, kw)));
        }
        if let Some(b) = b {
            if self.value(b).numel() != sw[0] {
                return Err(Error::shape("conv2d", format!("bias len {} vs {} filters", self.value(b).numel(), sw[0])));
            }
        }
        let dims = ConvDims {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sw[0],
            kh,
            kw,
            stride,
            pad,
            oh: (sx[1] + 2 * pad - kh) / stride + 1,
            ow: (sx[2] + 2 * pad - kw) / stride + 1,
        };
        let col = im2col(self.value(x).data(), &dims);
        let kdim = dims.cin * kh * kw;
        let ohw = dims.oh * dims.ow;
        let mut out = vec![T::zero(); dims.cout * ohw];
        T::gemm(dims.cout, kdim, ohw, T::one(), self.value(w).data(), &col, T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for co in 0..dims.cout {
                let bias = bd[co];
                for i in 0..ohw {
                    out[co * ohw + i] = out[co * ohw + i] + bias;
                }
            }
        }
        let value = Tensor::new(vec![dims.cout, dims.oh, dims.ow], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::Conv2d { x, w, b, dims, col })))
    }

    /// Per-channel 3x3 convolution, stride 1, pad 1.
    pub fn depthwise3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 3 || sw != vec![sx[0], 3, 3] || self.value(b).numel() != sx[0] {
            return Err(Error::shape("depthwise3x3", format!("x {:?}, w {:?}", sx, sw)));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let kd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); c * h * wd];
        for ci in 0..c {
            for y in 0..h {
                for xq in 0..wd {
                    let mut acc = bd[ci];
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = xq as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc
                                + kd[(ci * 3 + ky) * 3 + kx]
                                    * xd[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[(ci * h + y) * wd + xq] = acc;
                }
            }
        }
        let value = Tensor::new(vec![c, h, wd], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::Depthwise3x3 { x, w, b, c, h, wd })))
    }

    /// Average pooling to an output size that divides the input exactly.
    pub fn avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("avg_pool", format!("expected [C,H,W], got {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return Err(Error::shape("avg_pool", format!("{}x{} not divisible into {}x{}", h, w, oh, ow)));
        }
        let (fh, fw) = (h / oh, w / ow);
        let inv: T = sc(1.0 / (fh * fw) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc = acc + xd[(ci * h + oy * fh + dy) * w + ox * fw + dx];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::AvgPool { x, c, h, w, oh, ow })))
    }

    /// Align-corners bilinear resize to `oh x ow`.
    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("resize_bilinear", format!("expected [C,H,W], got {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coord(oy, h, oh);
            let (wy0, wy1): (T, T) = (sc(1.0 - fy), sc(fy));
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coord(ox, w, ow);
                let (wx0, wx1): (T, T) = (sc(1.0 - fx), sc(fx));
                for ci in 0..c {
                    let base = ci * h;
                    let v = wy0 * (wx0 * xd[(base + y0) * w + x0] + wx1 * xd[(base + y0) * w + x1])
                        + wy1 * (wx0 * xd[(base + y1) * w + x0] + wx1 * xd[(base + y1) * w + x1]);
                    out[(ci * oh + oy) * ow + ox] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::ResizeBilinear { x, c, h, w, oh, ow })))
    }

    /// Nearest-neighbor resize (floor mapping), used by the FPN top-down path.
    pub fn resize_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("resize_nearest", format!("expected [C,H,W], got {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for oy in 0..oh {
            let sy = (oy * h) / oh;
            for ox in 0..ow {
                let sxp = (ox * w) / ow;
                for ci in 0..c {
                    out[(ci * oh + oy) * ow + ox] = xd[(ci * h + sy) * w + sxp];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::ResizeNearest { x, c, h, w, oh, ow })))
    }

    /// Sample a [C,H,W] map at N points given as [x, y] rows in normalized
    /// [-1,1] coordinates (align-corners). Out-of-range points clamp to the
    /// border. Gradients flow to both the map and the point coordinates.
    pub fn bilinear_sample(&mut self, feat: NodeId, points: NodeId) -> Result<NodeId> {
        let sf = self.value(feat).shape().to_vec();
        let sp = self.value(points).shape().to_vec();
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::shape("bilinear_sample", format!("feat {:?}, points {:?}", sf, sp)));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let n = sp[0];
        let fd = self.value(feat).data();
        let pd = self.value(points).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let (px, py) = pixel_coords(pd[i * 2], pd[i * 2 + 1], w, h);
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let x0 = x0.to_usize().unwrap_or(0).min(w - 1);
            let y0 = y0.to_usize().unwrap_or(0).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                let base = ci * h;
                let v = (T::one() - fy)
                    * ((T::one() - fx) * fd[(base + y0) * w + x0] + fx * fd[(base + y0) * w + x1])
                    + fy * ((T::one() - fx) * fd[(base + y1) * w + x0] + fx * fd[(base + y1) * w + x1]);
                out[i * c + ci] = v;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::Spatial(SpatialOp::BilinearSample { feat, points, c, h, w, n })))
    }
}

/// Normalized [-1,1] -> clamped pixel coordinates (align-corners).
fn pixel_coords<T: Scalar>(x: T, y: T, w: usize, h: usize) -> (T, T) {
    let half = sc::<T>(0.5);
    let px = (x + T::one()) * half * sc((w - 1) as f64);
    let py = (y + T::one()) * half * sc((h - 1) as f64);
    (
        px.max(T::zero()).min(sc((w - 1) as f64)),
        py.max(T::zero()).min(sc((h - 1) as f64)),
    )
}

pub(super) fn backward<T: Scalar>(
    tape: &Tape<T>,
    op: &SpatialOp<T>,
    _out: &Tensor<T>,
    og: &[T],
    grads: &mut GradStore<T>,
) {
    match op {
        SpatialOp::Conv2d { x, w, b, dims, col } => {
            let d = dims;
            let kdim = d.cin * d.kh * d.kw;
            let ohw = d.oh * d.ow;
            {
                // dW = dOut x col^T
                let gw = grads.acc(*w, d.cout * kdim);
                T::gemm_strided(
                    d.cout, ohw, kdim, T::one(),
                    og, ohw as isize, 1,
                    col, 1, ohw as isize,
                    T::one(),
                    gw, kdim as isize, 1,
                );
            }
            if let Some(b) = b {
                let gb = grads.acc(*b, d.cout);
                for co in 0..d.cout {
                    let mut acc = T::zero();
                    for i in 0..ohw {
                        acc = acc + og[co * ohw + i];
                    }
                    gb[co] = gb[co] + acc;
                }
            }
            // dcol = W^T x dOut, then col2im into dx
            let wd = tape.value(*w).data();
            let mut dcol = vec![T::zero(); kdim * ohw];
            T::gemm_strided(
                kdim, d.cout, ohw, T::one(),
                wd, 1, kdim as isize,
                og, ohw as isize, 1,
                T::zero(),
                &mut dcol, ohw as isize, 1,
            );
            let gx = grads.acc(*x, d.cin * d.h * d.w);
            for ci in 0..d.cin {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let krow = (ci * d.kh + ky) * d.kw + kx;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for ox in 0..d.ow {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = (ci * d.h + iy as usize) * d.w + ix as usize;
                                gx[xi] = gx[xi] + dcol[krow * ohw + oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        SpatialOp::Depthwise3x3 { x, w, b, c, h, wd } => {
            let (c, h, wdim) = (*c, *h, *wd);
            let xd = tape.value(*x).data();
            let kd = tape.value(*w).data();
            let mut dx = vec![T::zero(); c * h * wdim];
            let mut dw = vec![T::zero(); c * 9];
            let mut db = vec![T::zero(); c];
            for ci in 0..c {
                for y in 0..h {
                    for xq in 0..wdim {
                        let go = og[(ci * h + y) * wdim + xq];
                        db[ci] = db[ci] + go;
                        for ky in 0..3usize {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = xq as isize + kx as isize - 1;
                                if ix < 0 || ix >= wdim as isize {
                                    continue;
                                }
                                let xi = (ci * h + iy as usize) * wdim + ix as usize;
                                dx[xi] = dx[xi] + kd[(ci * 3 + ky) * 3 + kx] * go;
                                dw[(ci * 3 + ky) * 3 + kx] = dw[(ci * 3 + ky) * 3 + kx] + xd[xi] * go;
                            }
                        }
                    }
                }
            }
            add_into(grads.acc(*x, c * h * wdim), &dx);
            add_into(grads.acc(*w, c * 9), &dw);
            add_into(grads.acc(*b, c), &db);
        }
        SpatialOp::AvgPool { x, c, h, w, oh, ow } => {
            let (fh, fw) = (h / oh, w / ow);
            let inv: T = sc(1.0 / (fh * fw) as f64);
            let gx = grads.acc(*x, c * h * w);
            for ci in 0..*c {
                for oy in 0..*oh {
                    for ox in 0..*ow {
                        let g = og[(ci * oh + oy) * ow + ox] * inv;
                        for dy in 0..fh {
                            for dx in 0..fw {
                                let xi = (ci * h + oy * fh + dy) * w + ox * fw + dx;
                                gx[xi] = gx[xi] + g;
                            }
                        }
                    }
                }
            }
        }
        SpatialOp::ResizeBilinear { x, c, h, w, oh, ow } => {
            let gx = grads.acc(*x, c * h * w);
            for oy in 0..*oh {
                let (y0, y1, fy) = resize_coord(oy, *h, *oh);
                let (wy0, wy1): (T, T) = (sc(1.0 - fy), sc(fy));
                for ox in 0..*ow {
                    let (x0, x1, fx) = resize_coord(ox, *w, *ow);
                    let (wx0, wx1): (T, T) = (sc(1.0 - fx), sc(fx));
                    for ci in 0..*c {
                        let g = og[(ci * oh + oy) * ow + ox];
                        let base = ci * h;
                        gx[(base + y0) * w + x0] = gx[(base + y0) * w + x0] + g * wy0 * wx0;
                        gx[(base + y0) * w + x1] = gx[(base + y0) * w + x1] + g * wy0 * wx1;
                        gx[(base + y1) * w + x0] = gx[(base + y1) * w + x0] + g * wy1 * wx0;
                        gx[(base + y1) * w + x1] = gx[(base + y1) * w + x1] + g * wy1 * wx1;
                    }
                }
            }
        }
        SpatialOp::ResizeNearest { x, c, h, w, oh, ow } => {
            let gx = grads.acc(*x, c * h * w);
            for oy in 0..*oh {
                let sy = (oy * h) / oh;
                for ox in 0..*ow {
                    let sxp = (ox * w) / ow;
                    for ci in 0..*c {
                        let xi = (ci * h + sy) * w + sxp;
                        gx[xi] = gx[xi] + og[(ci * oh + oy) * ow + ox];
                    }
                }
            }
        }
        SpatialOp::BilinearSample { feat, points, c, h, w, n } => {
            let (c, h, w) = (*c, *h, *w);
            let fd = tape.value(*feat).data();
            let pd = tape.value(*points).data();
            let mut dfeat = vec![T::zero(); c * h * w];
            let mut dpts = vec![T::zero(); n * 2];
            let half = sc::<T>(0.5);
            for i in 0..*n {
                let (rx, ry) = (pd[i * 2], pd[i * 2 + 1]);
                let (px, py) = pixel_coords(rx, ry, w, h);
                let x0f = px.floor();
                let y0f = py.floor();
                let fx = px - x0f;
                let fy = py - y0f;
                let x0 = x0f.to_usize().unwrap_or(0).min(w - 1);
                let y0 = y0f.to_usize().unwrap_or(0).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                // Clamped coordinates are flat: no gradient to the point there.
                let x_active = rx > -T::one() && rx < T::one();
                let y_active = ry > -T::one() && ry < T::one();
                let dpx_drx = if x_active { half * sc::<T>((w - 1) as f64) } else { T::zero() };
                let dpy_dry = if y_active { half * sc::<T>((h - 1) as f64) } else { T::zero() };
                let mut dpx = T::zero();
                let mut dpy = T::zero();
                for ci in 0..c {
                    let g = og[i * c + ci];
                    let base = ci * h;
                    let f00 = fd[(base + y0) * w + x0];
                    let f01 = fd[(base + y0) * w + x1];
                    let f10 = fd[(base + y1) * w + x0];
                    let f11 = fd[(base + y1) * w + x1];
                    dfeat[(base + y0) * w + x0] = dfeat[(base + y0) * w + x0] + g * (T::one() - fy) * (T::one() - fx);
                    dfeat[(base + y0) * w + x1] = dfeat[(base + y0) * w + x1] + g * (T::one() - fy) * fx;
                    dfeat[(base + y1) * w + x0] = dfeat[(base + y1) * w + x0] + g * fy * (T::one() - fx);
                    dfeat[(base + y1) * w + x1] = dfeat[(base + y1) * w + x1] + g * fy * fx;
                    dpx = dpx + g * ((T::one() - fy) * (f01 - f00) + fy * (f11 - f10));
                    dpy = dpy + g * ((T::one() - fx) * (f10 - f00) + fx * (f11 - f01));
                }
                dpts[i * 2] = dpx * dpx_drx;
                dpts[i * 2 + 1] = dpy * dpy_dry;
            }
            add_into(grads.acc(*feat, c * h * w), &dfeat);
            add_into(grads.acc(*points, n * 2), &dpts);
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
