//! Raw numeric kernels over slices. Shapes are validated by callers.

use super::Real;
use crate::error::{Error, Result};
use crate::exec;

/// `c (+)= op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
///
/// A transposed operand is read from a buffer stored in the transposed
/// layout, so no copy is made.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    trans_a: bool,
    b: &[R],
    trans_b: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: the assertion above bounds every address the strides reach.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn transpose<R: Real>(a: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// Padding before the first row/column.
    pub pad_lo: usize,
    /// Padding after the last row/column.
    pub pad_hi: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad_lo: usize, pad_hi: usize) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::config(format!(
                "conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != c {
            return Err(Error::config(format!(
                "conv2d kernel has {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let extent = |len: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = len + pad_lo + pad_hi;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::config(format!(
                    "conv2d {axis} extent ({len} + {pad_lo} + {pad_hi} - {k}) / {stride} is not integral"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let ho = extent(h, kh, "height")?;
        let wo = extent(w, kw, "width")?;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad_lo,
            pad_hi,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_lo == 0 && self.pad_hi == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ow·stride + kj − pad_lo`
/// falls inside the image.
fn valid_range(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pad_lo {
        0
    } else {
        (g.pad_lo - kj).div_ceil(g.stride)
    };
    // Largest ow with ow·stride + kj − pad_lo ≤ w − 1.
    let limit = g.w + g.pad_lo;
    let hi = if limit > kj {
        ((limit - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one instance (C×H×W) into a (C·kh·kw)×(Ho·Wo) column matrix.
fn im2col<R: Real>(x: &[R], g: &ConvGeom, cols: &mut [R]) {
    let pos = g.positions();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj);
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * g.stride + ki) as isize - g.pad_lo as isize;
                    if ih < 0 || ih >= g.h as isize || lo >= hi {
                        line.fill(R::zero());
                        continue;
                    }
                    line[..lo].fill(R::zero());
                    line[hi..].fill(R::zero());
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad_lo;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let pos = g.positions();
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj);
                if lo >= hi {
                    continue;
                }
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad_lo as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let line = &src[oh * g.wo + lo..oh * g.wo + hi];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad_lo;
                    if g.stride == 1 {
                        dst[first..first + (hi - lo)]
                            .iter_mut()
                            .zip(line)
                            .for_each(|(d, &s)| *d += s);
                    } else {
                        for (d, &s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Direct cross-correlation via im2col + GEMM, parallel over instances.
///
/// With `keep_cols` the unfolded columns of every instance are returned so
/// the backward pass can reuse them (empty for pointwise convolutions).
pub(crate) fn conv2d_forward<R: Real>(
    x: &[R],
    weight: &[R],
    bias: Option<&[R]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<R>, Vec<Vec<R>>) {
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * g.positions();
    let per_instance = exec::map_indexed(g.n, |n| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let mut dst = vec![R::zero(); out_len];
        let mut cols = Vec::new();
        if g.is_pointwise() {
            gemm(g.f, g.c, g.positions(), weight, false, xn, false, &mut dst, false);
        } else {
            cols = vec![R::zero(); g.patch() * g.positions()];
            im2col(xn, g, &mut cols);
            gemm(
                g.f,
                g.patch(),
                g.positions(),
                weight,
                false,
                &cols,
                false,
                &mut dst,
                false,
            );
        }
        if let Some(b) = bias {
            for (plane, &bf) in dst.chunks_mut(g.positions()).zip(b) {
                plane.iter_mut().for_each(|v| *v += bf);
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        (dst, cols)
    });
    let mut out = Vec::with_capacity(g.n * out_len);
    let mut kept = Vec::with_capacity(if keep_cols { g.n } else { 0 });
    for (dst, cols) in per_instance {
        out.extend_from_slice(&dst);
        if keep_cols {
            kept.push(cols);
        }
    }
    (out, kept)
}

pub(crate) struct ConvGrads<R> {
    pub input: Vec<R>,
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

/// Gradients of [`conv2d_forward`]. Per-instance weight/bias contributions
/// are summed in instance order. `cached_cols`, when non-empty, must be the
/// columns kept by the forward pass.
pub(crate) fn conv2d_backward<R: Real>(
    x: &[R],
    weight: &[R],
    grad_out: &[R],
    g: &ConvGeom,
    need_input: bool,
    cached_cols: &[Vec<R>],
) -> ConvGrads<R> {
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * g.positions();
    let wlen = g.f * g.patch();
    let per_instance = exec::map_indexed(g.n, |n| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let gn = &grad_out[n * out_len..(n + 1) * out_len];
        let mut dw = vec![R::zero(); wlen];
        let mut dx = if need_input {
            vec![R::zero(); in_len]
        } else {
            Vec::new()
        };
        if g.is_pointwise() {
            gemm(g.f, g.positions(), g.c, gn, false, xn, true, &mut dw, false);
            if need_input {
                gemm(g.c, g.f, g.positions(), weight, true, gn, false, &mut dx, false);
            }
        } else {
            let mut fresh = Vec::new();
            let cols: &[R] = match cached_cols.get(n) {
                Some(c) if !c.is_empty() => c,
                _ => {
                    fresh = vec![R::zero(); g.patch() * g.positions()];
                    im2col(xn, g, &mut fresh);
                    &fresh
                }
            };
            gemm(g.f, g.positions(), g.patch(), gn, false, cols, true, &mut dw, false);
            if need_input {
                let mut dcols = if fresh.is_empty() {
                    vec![R::zero(); g.patch() * g.positions()]
                } else {
                    Vec::new()
                };
                let buf = if fresh.is_empty() { &mut dcols } else { &mut fresh };
                gemm(g.patch(), g.f, g.positions(), weight, true, gn, false, buf, false);
                col2im(buf, g, &mut dx);
            }
        }
        let db: Vec<R> = gn
            .chunks(g.positions())
            .map(|plane| plane.iter().copied().sum())
            .collect();
        (dx, dw, db)
    });
    let mut grads = ConvGrads {
        input: Vec::with_capacity(if need_input { g.n * in_len } else { 0 }),
        weight: vec![R::zero(); wlen],
        bias: vec![R::zero(); g.f],
    };
    for (dx, dw, db) in per_instance {
        grads.input.extend_from_slice(&dx);
        grads.weight.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        grads.bias.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
    }
    grads
}

/// 2×2 max pooling with stride 2; returns values and flat argmax indices.
pub(crate) fn max_pool2<R: Real>(x: &[R], dims: [usize; 4]) -> (Vec<R>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source index along one axis for nearest-neighbour resampling.
pub(crate) fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    ((dst * src_len) / dst_len).min(src_len - 1)
}

/// Nearest-neighbour resize of every plane of an N×C×H×W tensor.
pub(crate) fn resize_nearest<R: Real>(x: &[R], dims: [usize; 4], ho: usize, wo: usize) -> Vec<R> {
    let [n, c, h, w] = dims;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            let si = nearest_index(i, ho, h);
            for j in 0..wo {
                out.push(x[base + si * w + nearest_index(j, wo, w)]);
            }
        }
    }
    out
}

pub(crate) fn resize_nearest_backward<R: Real>(grad: &[R], dims: [usize; 4], ho: usize, wo: usize) -> Vec<R> {
    let [n, c, h, w] = dims;
    let mut dx = vec![R::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            let si = nearest_index(i, ho, h);
            for j in 0..wo {
                dx[base + si * w + nearest_index(j, wo, w)] += grad[(plane * ho + i) * wo + j];
            }
        }
    }
    dx
}

/// Neumaier-compensated sum: error stays near one rounding of the result
/// rather than growing with the length.
pub fn compensated_sum<R: Real>(values: &[R]) -> R {
    let (mut sum, mut comp) = (R::zero(), R::zero());
    for &x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp = comp + ((sum - t) + x);
        } else {
            comp = comp + ((x - t) + sum);
        }
        sum = t;
    }
    sum + comp
}
