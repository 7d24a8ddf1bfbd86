//! Raw slice kernels behind the differentiable operations.
//!
//! Convolutions lower to a single GEMM over the whole batch via im2col. All
//! reductions run in a fixed order so results are bitwise reproducible.

use super::Scalar;

/// Geometry of a strided convolution from an `h x w` image to `ho x wo`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
        (len + 2 * pad - k) / stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn patch_count(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `n` images into a `[channels*k*k, n*ho*wo]` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, cols: &mut [T]) {
    let p_len = g.patch_count();
    let ncols = n * p_len;
    let plane = g.h * g.w;
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    debug_assert_eq!(x.len(), n * g.channels * plane);
    for ci in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let src = &x[(b * g.channels + ci) * plane..(b * g.channels + ci + 1) * plane];
                    for oy in 0..g.ho {
                        let dst = &mut dst_row[b * p_len + oy * g.wo..b * p_len + (oy + 1) * g.wo];
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], n: usize, g: &ConvGeom, x: &mut [T]) {
    let p_len = g.patch_count();
    let ncols = n * p_len;
    let plane = g.h * g.w;
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    debug_assert_eq!(x.len(), n * g.channels * plane);
    for ci in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let dst = &mut x[(b * g.channels + ci) * plane..(b * g.channels + ci + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * p_len + oy * g.wo..b * p_len + (oy + 1) * g.wo];
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] = drow[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` -> `[c, n*p]`.
pub(crate) fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n*p]` -> `[n, c, p]`, optionally adding a per-channel bias.
pub(crate) fn channel_major_to_batch<T: Scalar>(
    m: &[T],
    n: usize,
    c: usize,
    p: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &m[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            let dst = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
            match bias {
                Some(bias) => {
                    let bv = bias[ch];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

/// Sum over batch and spatial positions of an `[n, c, p]` tensor.
pub(crate) fn channel_sums<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let s: T = x[(b * c + ch) * p..(b * c + ch + 1) * p].iter().copied().sum();
            *o = *o + s;
        }
    }
    out
}

/// Forward convolution. `weight` is `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = g.rows();
    let np = n * g.patch_count();
    let mut cols = vec![T::zero(); rows * np];
    im2col(x, n, g, &mut cols);
    let mut out = vec![T::zero(); c_out * np];
    T::gemm(
        c_out, rows, np, T::one(), weight, rows as isize, 1, &cols, np as isize, 1, T::zero(), &mut out,
        np as isize, 1,
    );
    channel_major_to_batch(&out, n, c_out, g.patch_count(), bias)
}

/// Gradients of [`conv2d_forward`]; each output is computed only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.rows();
    let np = n * g.patch_count();
    let dymat = batch_to_channel_major(dy, n, c_out, g.patch_count());
    let dw = want_dw.then(|| {
        let mut cols = vec![T::zero(); rows * np];
        im2col(x, n, g, &mut cols);
        let mut dw = vec![T::zero(); c_out * rows];
        // dW[o, r] = sum_j dY[o, j] * cols[r, j]
        T::gemm(
            c_out, np, rows, T::one(), &dymat, np as isize, 1, &cols, 1, np as isize, T::zero(), &mut dw,
            rows as isize, 1,
        );
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * np];
        // dcols[r, j] = sum_o W[o, r] * dY[o, j]
        T::gemm(
            rows, c_out, np, T::one(), weight, 1, rows as isize, &dymat, np as isize, 1, T::zero(),
            &mut dcols, np as isize, 1,
        );
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, n, g, &mut dx);
        dx
    });
    (dx, dw)
}

/// Transposed convolution. `weight` is `[c_in, c_out, k, k]`; `g` describes the
/// matching forward convolution from the `[c_out, ho, wo]` output back to the
/// `[c_in, h, w]` input (so `g.h == ho_out` and `g.ho == h_in`).
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = g.rows();
    let in_p = g.patch_count();
    let np = n * in_p;
    let xmat = batch_to_channel_major(x, n, c_in, in_p);
    let mut cols = vec![T::zero(); rows * np];
    // cols[r, j] = sum_i W[i, r] * X[i, j]
    T::gemm(
        rows, c_in, np, T::one(), weight, 1, rows as isize, &xmat, np as isize, 1, T::zero(), &mut cols,
        np as isize, 1,
    );
    let out_plane = g.h * g.w;
    let mut out = vec![T::zero(); n * g.channels * out_plane];
    col2im(&cols, n, g, &mut out);
    if let Some(bias) = bias {
        for b in 0..n {
            for (ch, &bv) in bias.iter().enumerate() {
                for v in &mut out[(b * g.channels + ch) * out_plane..(b * g.channels + ch + 1) * out_plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.rows();
    let in_p = g.patch_count();
    let np = n * in_p;
    let mut dycols = vec![T::zero(); rows * np];
    im2col(dy, n, g, &mut dycols);
    let dx = want_dx.then(|| {
        let mut dxmat = vec![T::zero(); c_in * np];
        T::gemm(
            c_in, rows, np, T::one(), weight, rows as isize, 1, &dycols, np as isize, 1, T::zero(),
            &mut dxmat, np as isize, 1,
        );
        channel_major_to_batch(&dxmat, n, c_in, in_p, None)
    });
    let dw = want_dw.then(|| {
        let xmat = batch_to_channel_major(x, n, c_in, in_p);
        let mut dw = vec![T::zero(); c_in * rows];
        T::gemm(
            c_in, np, rows, T::one(), &xmat, np as isize, 1, &dycols, 1, np as isize, T::zero(), &mut dw,
            rows as isize, 1,
        );
        dw
    });
    (dx, dw)
}

/// Normalizes each contiguous group of `m` values to zero mean, unit variance.
/// Returns `(output, inv_std per group)`.
pub(crate) fn instance_norm_forward<T: Scalar>(x: &[T], m: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let groups = x.len() / m;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * m..(gi + 1) * m];
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, v) in out[gi * m..(gi + 1) * m].iter_mut().zip(xs) {
            *o = T::from_f64((v.as_f64() - mean) * inv_std);
        }
        inv.push(T::from_f64(inv_std));
    }
    (out, inv)
}

/// Backward of a normalization given `xhat` (the normalized values) grouped in
/// runs of `m`: `dx = inv * (dy - mean(dy) - xhat * mean(dy * xhat))`.
pub(crate) fn instance_norm_backward<T: Scalar>(xhat: &[T], inv: &[T], dy: &[T], m: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for (gi, &inv_std) in inv.iter().enumerate() {
        let r = gi * m..(gi + 1) * m;
        let (mean_dy, mean_dyx) = xhat[r.clone()].iter().zip(&dy[r.clone()]).fold((0.0, 0.0), |(a, b), (&xh, &g)| {
            (a + g.as_f64(), b + g.as_f64() * xh.as_f64())
        });
        let mean_dy = mean_dy / m as f64;
        let mean_dyx = mean_dyx / m as f64;
        let inv_std = inv_std.as_f64();
        for ((d, &xh), &g) in dx[r.clone()].iter_mut().zip(&xhat[r.clone()]).zip(&dy[r]) {
            *d = T::from_f64(inv_std * (g.as_f64() - mean_dy - xh.as_f64() * mean_dyx));
        }
    }
    dx
}

/// Per-channel statistics of an `[n, c, p]` tensor over batch and positions.
/// Returns `(mean, biased variance)`.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * p) as f64;
    let mut mean = vec![0.0; c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x[(b * c + ch) * p..(b * c + ch + 1) * p].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let mu = mean[ch];
            *v += x[(b * c + ch) * p..(b * c + ch + 1) * p]
                .iter()
                .map(|x| (x.as_f64() - mu).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Batch-norm input gradient from `dxhat` (already multiplied by gamma).
pub(crate) fn batch_norm_backward<T: Scalar>(
    xhat: &[T],
    inv: &[T],
    dxhat: &[T],
    n: usize,
    c: usize,
    p: usize,
) -> Vec<T> {
    let count = (n * p) as f64;
    let mut mean_d = vec![0.0; c];
    let mut mean_dx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (&g, &xh) in dxhat[r.clone()].iter().zip(&xhat[r]) {
                mean_d[ch] += g.as_f64();
                mean_dx[ch] += g.as_f64() * xh.as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); dxhat.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            let md = mean_d[ch] / count;
            let mdx = mean_dx[ch] / count;
            let iv = inv[ch].as_f64();
            for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dxhat[r.clone()]).zip(&xhat[r]) {
                *d = T::from_f64(iv * (g.as_f64() - md - xh.as_f64() * mdx));
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        let (c, h, w, o, k) = (2, 7, 5, 3, 3);
        for &(s, p) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let g = ConvGeom {
                channels: c,
                h,
                w,
                k,
                stride: s,
                pad: p,
                ho: ConvGeom::conv_out(h, k, s, p),
                wo: ConvGeom::conv_out(w, k, s, p),
            };
            let got = conv2d_forward(&x, 1, &g, &wt, o, None);
            assert_eq!(got, naive_conv(&x, c, h, w, &wt, o, k, s, p), "stride {s} pad {p}");
        }
    }
}
