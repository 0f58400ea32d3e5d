//! Forward and backward kernels for the spatial ops. All tensors are NCHW.

use super::tensor::gemm;
use super::{NumericsError, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, NumericsError> {
        if stride == 0 {
            return Err(NumericsError::Dimension("stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(NumericsError::Dimension(format!(
                "window {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if in_len + self.pad > k { ((in_len + self.pad - k - 1) / s + 1).min(out_len) } else { 0 };
        (lo.min(hi), hi)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.oh, g.ow);
    let (xlo, xhi) = (0..g.kw).map(|kj| g.valid_range(kj, g.w, ow)).unzip::<_, _, Vec<_>, Vec<_>>();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * oh * ow;
                for oy in 0..oh {
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = (xlo[kj], xhi[kj]);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                        *d = src[ox * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.oh, g.ow);
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * oh * ow;
                let (lo, hi) = g.valid_range(kj, g.w, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in lo..hi {
                        dx[base + ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom, NumericsError> {
    let mismatch = || {
        NumericsError::Dimension(format!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            input.shape(),
            kernel.shape()
        ))
    };
    let [_, c, h, w] = input.dims4().map_err(|_| mismatch())?;
    let [_, kc, kh, kw] = kernel.dims4().map_err(|_| mismatch())?;
    if kc != c {
        return Err(mismatch());
    }
    ConvGeom::new(c, h, w, kh, kw, stride, padding).map_err(|e| {
        NumericsError::Dimension(format!(
            "conv2d: input {:?}, kernel {:?}: {e}",
            input.shape(),
            kernel.shape()
        ))
    })
}

pub(crate) fn conv2d_forward<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * f * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let in_sz = g.c * g.h * g.w;
    for (i, out_n) in out.chunks_mut(f * cols).enumerate() {
        let x = &input.data()[i * in_sz..(i + 1) * in_sz];
        let col_ref = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut col);
            &col[..]
        };
        gemm(f, rows, cols, kernel.data(), false, col_ref, false, out_n, false);
    }
    Tensor::new(vec![n, f, g.oh, g.ow], out).expect("conv output shape")
}

/// Returns `(d_input, d_kernel)`, each computed only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
    dy: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = input.shape()[0];
    let f = kernel.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = need_kernel.then(|| vec![T::zero(); kernel.numel()]);
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    for i in 0..n {
        let dy_n = &dy[i * f * cols..(i + 1) * f * cols];
        let x = &input.data()[i * in_sz..(i + 1) * in_sz];
        if let Some(dw) = dw.as_mut() {
            let col_ref = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut col);
                &col[..]
            };
            // dW[f, rows] += dY[f, cols] · colᵀ[cols, rows]
            gemm(f, cols, rows, dy_n, false, col_ref, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, f, cols, kernel.data(), true, dy_n, false, dx_n, true);
            } else {
                gemm(rows, f, cols, kernel.data(), true, dy_n, false, &mut dcol, false);
                col2im_add(&dcol, g, dx_n);
            }
        }
    }
    (dx, dw)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per
/// output element, the flat input index that won (first index on ties).
pub(crate) fn max_pool_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>), NumericsError> {
    let [n, c, h, w] = input.dims4()?;
    if pad >= k {
        return Err(NumericsError::Dimension(format!("max_pool2d: padding {pad} must be below window {k}")));
    }
    let g = ConvGeom::new(c, h, w, k, k, stride, pad)
        .map_err(|e| NumericsError::Dimension(format!("max_pool2d on {:?}: {e}", input.shape())))?;
    let mut out = Vec::with_capacity(n * c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..g.oh {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..g.ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for yy in y0.max(0)..(y0 + k as isize).min(h as isize) {
                    for xx in x0.max(0)..(x0 + k as isize).min(w as isize) {
                        let idx = base + yy as usize * w + xx as usize;
                        if x[idx] > best || best_i == usize::MAX {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, g.oh, g.ow], out)?, arg))
}

/// Per-channel statistics over (N, H, W): `(mean, biased variance)`.
pub(crate) fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>), NumericsError> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s += x.data()[off..off + hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut ss = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            ss += x.data()[off..off + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    Ok((mean, var))
}

/// Bilinear resize of a single `[H,W]` map, half-pixel (align-corners
/// false) sampling with edge clamping.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>, NumericsError> {
    let [h, w] = x.dims2()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(NumericsError::Dimension(format!(
            "bilinear_resize: cannot resize {:?} to {out_h}x{out_w}",
            x.shape()
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone().with_requires_grad(false));
    }
    let half_pixel = |in_len: usize, out_len: usize| {
        let scale = in_len as f64 / out_len as f64;
        (scale, 0.5 * scale - 0.5)
    };
    bilinear_affine(x, out_h, out_w, half_pixel(h, out_h), half_pixel(w, out_w))
}

/// Bilinear sampling of an `[H,W]` map where output index `o` reads the
/// source at `a·o + b` along each axis (`(a, b)` per axis), clamped to the
/// source extent.
pub fn bilinear_affine<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    rows: (f64, f64),
    cols: (f64, f64),
) -> Result<Tensor<T>, NumericsError> {
    let [h, w] = x.dims2()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(NumericsError::Dimension(format!(
            "bilinear sampling: cannot map {:?} to {out_h}x{out_w}",
            x.shape()
        )));
    }
    let taps = |in_len: usize, out_len: usize, (a, b): (f64, f64)| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|o| {
                let src = (a * o as f64 + b).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(h, out_h, rows);
    let cols = taps(w, out_w, cols);
    let d = x.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let v = |r: usize, c: usize| d[r * w + c].to_f64().unwrap();
            let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
            let bot = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
            out.push(T::lit(top * (1.0 - fr) + bot * fr));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
