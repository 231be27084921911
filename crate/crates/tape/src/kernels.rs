//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Convolutions go through im2col and a GEMM per batch item. Gradient
//! accumulation over the batch always runs in increasing batch order, so
//! results are bitwise reproducible.

use crate::element::{gemm, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in
/// `[0, w)`, as a half-open range.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // ox * stride + k - pad < w  <=>  ox * stride < w + pad - k
    let hi = if w + pad > k { (w + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

/// Unfold one image `[c, h, w]` into `col[c*kh*kw, oh*ow]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.ow, g.stride, kx, g.pad, g.w);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                dst[..y0 * g.ow].fill(T::zero());
                dst[y1 * g.ow..].fill(T::zero());
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    if x1 > x0 {
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (o, &v) in out[x0..x1].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into an image `[c, h, w]`.
pub(crate) fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = valid_range(g.oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (x0, x1) = valid_range(g.ow, g.stride, kx, g.pad, g.w);
                if x1 == x0 {
                    continue;
                }
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.ow + x0..oy * g.ow + x1];
                    let ix0 = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// A 1x1, stride-1, unpadded convolution's column matrix is the image itself.
fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// conv2d forward. `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`, `b: [cout]`.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], n: usize, w: &[T], b: &[T], cout: usize, g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut col = vec![T::zero(); if is_pointwise(g) { 0 } else { k * p }];
    let pointwise = is_pointwise(g);
    for bi in 0..n {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let src = if pointwise {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let dst = &mut out[bi * cout * p..(bi + 1) * cout * p];
        gemm(cout, k, p, T::one(), (w, k, 1), (src, p, 1), T::zero(), (dst, p, 1));
        for co in 0..cout {
            let bias = b[co];
            for v in &mut dst[co * p..(co + 1) * p] {
                *v = *v + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    g: &ConvGeom,
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); n * in_sz]);
    let mut dw = need.1.then(|| vec![T::zero(); cout * k]);
    let mut db = need.2.then(|| vec![T::zero(); cout]);
    let pointwise = is_pointwise(g);
    let mut col = vec![T::zero(); if pointwise { 0 } else { k * p }];
    for bi in 0..n {
        let go = &gout[bi * cout * p..(bi + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[bi * in_sz..(bi + 1) * in_sz];
            let src = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dw[cout, k] += go[cout, p] * col^T[p, k]
            gemm(cout, p, k, T::one(), (go, p, 1), (src, 1, p), T::one(), (dw, k, 1));
        }
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = db[co];
                for &v in &go[co * p..(co + 1) * p] {
                    acc = acc + v;
                }
                db[co] = acc;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
            // col[k, p] = w^T[k, cout] * go[cout, p]
            if pointwise {
                gemm(k, cout, p, T::one(), (w, 1, k), (go, p, 1), T::zero(), (dxb, p, 1));
            } else {
                gemm(k, cout, p, T::one(), (w, 1, k), (go, p, 1), T::zero(), (&mut col, p, 1));
                col2im(&col, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution forward, no padding. `x: [n, cin, h, w]`,
/// `w: [cin, cout, kh, kw]`, `b: [cout]`. `g` describes the *output* image
/// as the input of the matching strided conv2d (so `g.oh == h`).
pub(crate) fn conv_t_forward<T: Element>(x: &[T], n: usize, cin: usize, w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.rows(), g.cols());
    let out_sz = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * out_sz];
    let mut col = vec![T::zero(); k * p];
    for bi in 0..n {
        let xb = &x[bi * cin * p..(bi + 1) * cin * p];
        // col[k, p] = w^T[k, cin] * x[cin, p]
        gemm(k, cin, p, T::one(), (w, 1, k), (xb, p, 1), T::zero(), (&mut col, p, 1));
        let dst = &mut out[bi * out_sz..(bi + 1) * out_sz];
        col2im(&col, g, dst);
        let plane = g.h * g.w;
        for co in 0..g.c {
            let bias = b[co];
            for v in &mut dst[co * plane..(co + 1) * plane] {
                *v = *v + bias;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    g: &ConvGeom,
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.rows(), g.cols());
    let out_sz = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); n * cin * p]);
    let mut dw = need.1.then(|| vec![T::zero(); cin * k]);
    let mut db = need.2.then(|| vec![T::zero(); g.c]);
    let mut col = vec![T::zero(); k * p];
    for bi in 0..n {
        let go = &gout[bi * out_sz..(bi + 1) * out_sz];
        if let Some(db) = db.as_mut() {
            let plane = g.h * g.w;
            for co in 0..g.c {
                let mut acc = db[co];
                for &v in &go[co * plane..(co + 1) * plane] {
                    acc = acc + v;
                }
                db[co] = acc;
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(go, g, &mut col);
        if let Some(dx) = dx.as_mut() {
            // dx[cin, p] = w[cin, k] * col[k, p]
            gemm(cin, k, p, T::one(), (w, k, 1), (&col, p, 1), T::zero(), (&mut dx[bi * cin * p..(bi + 1) * cin * p], p, 1));
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[bi * cin * p..(bi + 1) * cin * p];
            // dw[cin, k] += x[cin, p] * col^T[p, k]
            gemm(cin, p, k, T::one(), (xb, p, 1), (&col, 1, p), T::one(), (dw, k, 1));
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, for every
/// output, the flat input index of the window maximum (first in scan order
/// on ties).
pub(crate) fn maxpool_forward<T: Element>(x: &[T], nc: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Element>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); nc * 4 * h * w];
    for plane in 0..nc {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * ow + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); nc * h * w];
    for plane in 0..nc {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * ow + 2 * xx;
                dst[y * w + xx] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { c: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1, oh: 3, ow: 3 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; g.rows() * g.cols()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut col = Vec::new();
        for ci in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside = iy >= 0 && ix >= 0 && iy < g.h as isize && ix < g.w as isize;
                            col.push(if inside { x[(ci * g.h + iy as usize) * g.w + ix as usize] } else { 0.0 });
                        }
                    }
                }
            }
        }
        col
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for stride in 1..=3 {
            for pad in 0..=3 {
                for (kh, kw) in [(1, 1), (2, 2), (3, 3), (3, 1), (1, 4)] {
                    for (h, w) in [(1, 1), (4, 5), (7, 3)] {
                        if h + 2 * pad < kh || w + 2 * pad < kw {
                            continue;
                        }
                        let (oh, ow) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1);
                        let g = ConvGeom { c: 2, h, w, kh, kw, stride, pad, oh, ow };
                        let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
                        let mut col = vec![f64::NAN; g.rows() * g.cols()];
                        im2col(&x, &g, &mut col);
                        assert_eq!(col, naive_im2col(&x, &g), "{g:?}");

                        // col2im is the exact transpose of the naive unfold
                        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i % 7) as f64).collect();
                        let mut back = vec![0.0; x.len()];
                        col2im(&y, &g, &mut back);
                        for (i, b) in back.iter().enumerate() {
                            let mut e = vec![0.0; x.len()];
                            e[i] = 1.0;
                            let expected: f64 = naive_im2col(&e, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
                            assert_eq!(*b, expected, "{g:?} at {i}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (out, arg) = maxpool_forward(&[2.0f32, 2.0, 2.0, 2.0], 1, 2, 2);
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
    }
}
