//! Raw numeric kernels over flat row-major slices.
//!
//! Convolution weights are laid out `[A, B, k, k, k]`. [`correlate`] maps a
//! `B`-channel volume to an `A`-channel volume (ordinary convolution), and
//! [`scatter`] maps `A` channels to `B` channels (its adjoint, which is also
//! the transposed convolution). [`weight_grad`] is the shared weight gradient.

use std::ops::Range;

use super::Scalar;

pub type Dims = [usize; 3];

#[inline]
pub fn volume(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Output extent of a strided convolution, `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if len + 2 * pad < k || stride == 0 {
        None
    } else {
        Some((len + 2 * pad - k) / stride + 1)
    }
}

/// Output positions `o` for which `o * stride + tap - pad` lands inside `0..in_len`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> Range<usize> {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= tap {
        return 0..0;
    }
    let hi = ((in_len + pad - tap - 1) / stride + 1).min(out_len);
    lo..hi.max(lo)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// `out[a][o] += Σ_b Σ_tap w[a][b][tap] · x[b][o·stride + tap − pad]`
#[allow(clippy::too_many_arguments)]
pub fn correlate<T: Scalar>(
    x: &[T],
    x_dims: Dims,
    b_ch: usize,
    w: &[T],
    a_ch: usize,
    geom: ConvGeom,
    out: &mut [T],
    out_dims: Dims,
) {
    let ConvGeom { k, stride, pad } = geom;
    let (xvol, ovol, k3) = (volume(x_dims), volume(out_dims), k * k * k);
    for a in 0..a_ch {
        let out_a = &mut out[a * ovol..(a + 1) * ovol];
        for b in 0..b_ch {
            let x_b = &x[b * xvol..(b + 1) * xvol];
            let w_ab = &w[(a * b_ch + b) * k3..(a * b_ch + b + 1) * k3];
            for kz in 0..k {
                let rz = valid_range(kz, pad, stride, x_dims[0], out_dims[0]);
                for ky in 0..k {
                    let ry = valid_range(ky, pad, stride, x_dims[1], out_dims[1]);
                    for kx in 0..k {
                        let rx = valid_range(kx, pad, stride, x_dims[2], out_dims[2]);
                        if rx.is_empty() {
                            continue;
                        }
                        let wv = w_ab[(kz * k + ky) * k + kx];
                        for oz in rz.clone() {
                            let iz = oz * stride + kz - pad;
                            for oy in ry.clone() {
                                let iy = oy * stride + ky - pad;
                                let orow = &mut out_a[(oz * out_dims[1] + oy) * out_dims[2]..]
                                    [..out_dims[2]];
                                let xrow = &x_b[(iz * x_dims[1] + iy) * x_dims[2]..][..x_dims[2]];
                                if stride == 1 {
                                    let start = rx.start + kx - pad;
                                    for (o, &xv) in orow[rx.clone()].iter_mut().zip(&xrow[start..]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in rx.clone() {
                                        orow[ox] += wv * xrow[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x[b][o·stride + tap − pad] += Σ_a w[a][b][tap] · g[a][o]`
#[allow(clippy::too_many_arguments)]
pub fn scatter<T: Scalar>(
    g: &[T],
    g_dims: Dims,
    a_ch: usize,
    w: &[T],
    b_ch: usize,
    geom: ConvGeom,
    x: &mut [T],
    x_dims: Dims,
) {
    let ConvGeom { k, stride, pad } = geom;
    let (xvol, gvol, k3) = (volume(x_dims), volume(g_dims), k * k * k);
    for b in 0..b_ch {
        let x_b = &mut x[b * xvol..(b + 1) * xvol];
        for a in 0..a_ch {
            let g_a = &g[a * gvol..(a + 1) * gvol];
            let w_ab = &w[(a * b_ch + b) * k3..(a * b_ch + b + 1) * k3];
            for kz in 0..k {
                let rz = valid_range(kz, pad, stride, x_dims[0], g_dims[0]);
                for ky in 0..k {
                    let ry = valid_range(ky, pad, stride, x_dims[1], g_dims[1]);
                    for kx in 0..k {
                        let rx = valid_range(kx, pad, stride, x_dims[2], g_dims[2]);
                        if rx.is_empty() {
                            continue;
                        }
                        let wv = w_ab[(kz * k + ky) * k + kx];
                        for oz in rz.clone() {
                            let iz = oz * stride + kz - pad;
                            for oy in ry.clone() {
                                let iy = oy * stride + ky - pad;
                                let grow = &g_a[(oz * g_dims[1] + oy) * g_dims[2]..][..g_dims[2]];
                                let xrow =
                                    &mut x_b[(iz * x_dims[1] + iy) * x_dims[2]..][..x_dims[2]];
                                if stride == 1 {
                                    let start = rx.start + kx - pad;
                                    for (xv, &gv) in xrow[start..].iter_mut().zip(&grow[rx.clone()]) {
                                        *xv += wv * gv;
                                    }
                                } else {
                                    for ox in rx.clone() {
                                        xrow[ox * stride + kx - pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gw[a][b][tap] += Σ_o g[a][o] · x[b][o·stride + tap − pad]`
#[allow(clippy::too_many_arguments)]
pub fn weight_grad<T: Scalar>(
    g: &[T],
    g_dims: Dims,
    a_ch: usize,
    x: &[T],
    x_dims: Dims,
    b_ch: usize,
    geom: ConvGeom,
    gw: &mut [T],
) {
    let ConvGeom { k, stride, pad } = geom;
    let (xvol, gvol, k3) = (volume(x_dims), volume(g_dims), k * k * k);
    for a in 0..a_ch {
        let g_a = &g[a * gvol..(a + 1) * gvol];
        for b in 0..b_ch {
            let x_b = &x[b * xvol..(b + 1) * xvol];
            let gw_ab = &mut gw[(a * b_ch + b) * k3..(a * b_ch + b + 1) * k3];
            for kz in 0..k {
                let rz = valid_range(kz, pad, stride, x_dims[0], g_dims[0]);
                for ky in 0..k {
                    let ry = valid_range(ky, pad, stride, x_dims[1], g_dims[1]);
                    for kx in 0..k {
                        let rx = valid_range(kx, pad, stride, x_dims[2], g_dims[2]);
                        let mut acc = T::zero();
                        for oz in rz.clone() {
                            let iz = oz * stride + kz - pad;
                            for oy in ry.clone() {
                                let iy = oy * stride + ky - pad;
                                let grow = &g_a[(oz * g_dims[1] + oy) * g_dims[2]..][..g_dims[2]];
                                let xrow = &x_b[(iz * x_dims[1] + iy) * x_dims[2]..][..x_dims[2]];
                                if stride == 1 {
                                    let start = rx.start + kx - pad;
                                    for (&gv, &xv) in grow[rx.clone()].iter().zip(&xrow[start..]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for ox in rx.clone() {
                                        acc += grow[ox] * xrow[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                        gw_ab[(kz * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Per-group statistics saved by [`group_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes `rows` contiguous segments of length `len` each, then applies a
/// per-row affine transform looked up through `affine_index`.
fn normalize_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    len: usize,
    eps: T,
    mut affine: impl FnMut(usize, usize) -> (T, T),
    y: &mut [T],
) -> NormStats<T> {
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    let n = len as f64;
    for r in 0..rows {
        let seg = &x[r * len..(r + 1) * len];
        let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = seg
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let rstd = 1.0 / (var + eps.as_f64()).sqrt();
        let (mean_t, rstd_t) = (T::from_f64(mean), T::from_f64(rstd));
        for (i, (out, &v)) in y[r * len..(r + 1) * len].iter_mut().zip(seg).enumerate() {
            let (gamma, beta) = affine(r, i);
            *out = (v - mean_t) * rstd_t * gamma + beta;
        }
        stats.mean.push(mean_t);
        stats.rstd.push(rstd_t);
    }
    stats
}

/// Group normalization over `[C, S]` data with `groups` contiguous channel groups.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) -> NormStats<T> {
    let spatial = x.len() / channels;
    let per_group = channels / groups;
    normalize_rows(
        x,
        groups,
        per_group * spatial,
        eps,
        |g, i| {
            let c = g * per_group + i / spatial;
            (gamma[c], beta[c])
        },
        y,
    )
}

/// Shared backward for row normalization. `affine_c(r, i)` gives the affine
/// parameter index of element `i` in row `r`.
#[allow(clippy::too_many_arguments)]
fn normalize_rows_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    len: usize,
    stats: &NormStats<T>,
    gamma: &[T],
    affine_c: impl Fn(usize, usize) -> usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let n = len as f64;
    for r in 0..rows {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let xs = &x[r * len..(r + 1) * len];
        let dys = &dy[r * len..(r + 1) * len];
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for i in 0..len {
            let c = affine_c(r, i);
            let xhat = (xs[i] - mean) * rstd;
            let dxhat = dys[i] * gamma[c];
            sum_dxhat += dxhat.as_f64();
            sum_dxhat_xhat += (dxhat * xhat).as_f64();
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[c] += dys[i] * xhat;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[c] += dys[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let a = T::from_f64(sum_dxhat / n);
            let b = T::from_f64(sum_dxhat_xhat / n);
            for i in 0..len {
                let c = affine_c(r, i);
                let xhat = (xs[i] - mean) * rstd;
                let dxhat = dys[i] * gamma[c];
                dx[r * len + i] += rstd * (dxhat - a - xhat * b);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    channels: usize,
    groups: usize,
    gamma: &[T],
    stats: &NormStats<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let spatial = x.len() / channels;
    let per_group = channels / groups;
    normalize_rows_backward(
        x,
        dy,
        groups,
        per_group * spatial,
        stats,
        gamma,
        |g, i| g * per_group + i / spatial,
        dx,
        dgamma,
        dbeta,
    );
}

/// Layer normalization over the last axis of `[rows, len]` data.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    len: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) -> NormStats<T> {
    normalize_rows(x, x.len() / len, len, eps, |_, i| (gamma[i], beta[i]), y)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    len: usize,
    gamma: &[T],
    stats: &NormStats<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    normalize_rows_backward(
        x,
        dy,
        x.len() / len,
        len,
        stats,
        gamma,
        |_, i| i,
        dx,
        dgamma,
        dbeta,
    );
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle axis of an `(outer, len, inner)` view.
pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, y: &mut [T]) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut max = x[at(0)];
            for j in 1..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                y[at(j)] *= inv;
            }
        }
    }
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [T],
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: T = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, c: &mut [T]) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×m] += a[n×k] · bᵀ` where `b` is stored `[m×k]`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, c: &mut [T]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * m + j] += dot;
        }
    }
}

/// `c[k×m] += aᵀ · b` where `a` is stored `[n×k]` and `b` is `[n×m]`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, c: &mut [T]) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in c[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// 2-D transpose of a `[rows × cols]` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for in_len in 1..9 {
            for k in [1usize, 2, 3] {
                for stride in [1usize, 2] {
                    for pad in 0..2 {
                        let Some(out_len) = conv_out_len(in_len, k, stride, pad) else {
                            continue;
                        };
                        for tap in 0..k {
                            let expect: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + tap) as isize - pad as isize;
                                    i >= 0 && (i as usize) < in_len
                                })
                                .collect();
                            let got: Vec<usize> =
                                valid_range(tap, pad, stride, in_len, out_len).collect();
                            assert_eq!(got, expect, "len={in_len} k={k} s={stride} p={pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = [0.0f64, 2f64.ln(), 4f64.ln()];
        let mut y = [0.0; 3];
        softmax_forward(&x, 1, 3, 1, &mut y);
        for (got, want) in y.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(c, [-1.0, 7.5, -1.0, 18.0]);
        let bt = transpose(&b, 3, 2);
        let mut c2 = [0.0; 4];
        matmul_bt_acc(&a, &bt, 2, 3, 2, &mut c2);
        assert_eq!(c, c2);
        let at = transpose(&a, 2, 3);
        let mut c3 = [0.0; 4];
        matmul_at_acc(&at, &b, 3, 2, 2, &mut c3);
        assert_eq!(c, c3);
    }
}
