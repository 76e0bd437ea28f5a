//! Forward and backward kernels on raw NCHW slices.
//!
//! The tape calls into these; they know nothing about graph bookkeeping.

use super::Scalar;
use crate::error::{bail, Result};

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        weight: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = input;
        let [out_channels, w_in, kernel_h, kernel_w] = weight;
        if w_in != in_channels {
            bail!(
                Dimension,
                "conv weight expects {w_in} input channels, input has {in_channels}"
            );
        }
        if stride == 0 {
            bail!(Config, "conv stride must be positive");
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            bail!(Config, "conv kernel must be odd, got {kernel_h}x{kernel_w}");
        }
        let out_h = out_extent(in_h, kernel_h, stride, padding, "height")?;
        let out_w = out_extent(in_w, kernel_w, stride, padding, "width")?;
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Multiply-accumulates of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_pixels() * self.patch_len()) as u64
    }
}

// A stride that does not divide the span evenly is accepted only when the
// leftover falls entirely inside the trailing zero padding; dropping real
// input rows is a configuration error.
fn out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    axis: &str,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        bail!(
            Dimension,
            "conv {axis}: padded extent {padded} smaller than kernel {kernel}"
        );
    }
    let span = padded - kernel;
    let rem = span % stride;
    if rem > padding {
        bail!(
            Config,
            "conv {axis}: extent {input} with kernel {kernel}, stride {stride}, padding {padding} \
             does not give an integral output size"
        );
    }
    Ok(span / stride + 1)
}

/// Unfolds one image `[C, H, W]` into `[C·kh·kw, out_h·out_w]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let n = g.out_pixels();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *out = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let n = g.out_pixels();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Returns the output and, for non-pointwise kernels, the unfolded columns of
/// every batch item (reused by the backward pass).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Option<Vec<T>>) {
    let k = g.patch_len();
    let n = g.out_pixels();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * n;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        None
    } else {
        Some(vec![T::zero(); g.batch * k * n])
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for (co, chunk) in ob.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        let colb: &[T] = match cols.as_mut() {
            Some(c) => {
                let cb = &mut c[b * k * n..(b + 1) * k * n];
                im2col(xb, g, cb);
                cb
            }
            None => xb,
        };
        // SAFETY: weight is [out_channels, k], colb is [k, n], ob is [out_channels, n].
        unsafe {
            T::gemm(
                g.out_channels,
                k,
                n,
                T::one(),
                weight.as_ptr(),
                k as isize,
                1,
                colb.as_ptr(),
                n as isize,
                1,
                T::one(),
                ob.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (out, cols)
}

/// Accumulates gradients for whichever of input, weight and bias are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    cols: Option<&[T]>,
    dy: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let k = g.patch_len();
    let n = g.out_pixels();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * n;
    let col_of = |b: usize| -> &[T] {
        match cols {
            Some(c) => &c[b * k * n..(b + 1) * k * n],
            None => &x[b * in_len..(b + 1) * in_len],
        }
    };
    if let Some(db) = db {
        for b in 0..g.batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            for (co, chunk) in dyb.chunks(n).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dw) = dw {
        for b in 0..g.batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            let colb = col_of(b);
            // SAFETY: dw[co, r] += Σ_p dy[co, p] · cols[r, p]; cols read transposed.
            unsafe {
                T::gemm(
                    g.out_channels,
                    n,
                    k,
                    T::one(),
                    dyb.as_ptr(),
                    n as isize,
                    1,
                    colb.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * n];
        for b in 0..g.batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            let target: &mut [T] = if g.is_pointwise() { dxb } else { &mut dcols };
            let beta = if g.is_pointwise() { T::one() } else { T::zero() };
            // SAFETY: target[r, p] (+)= Σ_co w[co, r] · dy[co, p]; weight read transposed.
            unsafe {
                T::gemm(
                    k,
                    g.out_channels,
                    n,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    k as isize,
                    dyb.as_ptr(),
                    n as isize,
                    1,
                    beta,
                    target.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
    }
}

/// Cached statistics of a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub normalized: Vec<T>,
    /// One reciprocal standard deviation per (batch, group).
    pub inv_std: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupNormCache<T>) {
    let [batch, channels, h, w] = dims;
    let per_channel = h * w;
    let group_len = channels / groups * per_channel;
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(batch * groups);
    let count = T::from_f64(group_len as f64);
    for (gi, chunk) in x.chunks(group_len).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / count;
        let var = chunk
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / count;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let base = gi * group_len;
        for (i, &v) in chunk.iter().enumerate() {
            let idx = base + i;
            let c = (idx / per_channel) % channels;
            let xn = (v - mean) * rstd;
            normalized[idx] = xn;
            out[idx] = gamma[c] * xn + beta[c];
        }
    }
    (out, GroupNormCache { normalized, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    dy: &[T],
    dims: [usize; 4],
    groups: usize,
    gamma: &[T],
    cache: &GroupNormCache<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let [_, channels, h, w] = dims;
    let per_channel = h * w;
    let group_len = channels / groups * per_channel;
    let chan = |idx: usize| (idx / per_channel) % channels;
    if let Some(dgamma) = dgamma {
        for (idx, (&g, &xn)) in dy.iter().zip(&cache.normalized).enumerate() {
            let c = chan(idx);
            dgamma[c] = dgamma[c] + g * xn;
        }
    }
    if let Some(dbeta) = dbeta {
        for (idx, &g) in dy.iter().enumerate() {
            let c = chan(idx);
            dbeta[c] = dbeta[c] + g;
        }
    }
    if let Some(dx) = dx {
        let count = T::from_f64(group_len as f64);
        for gi in 0..cache.inv_std.len() {
            let base = gi * group_len;
            let range = base..base + group_len;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for idx in range.clone() {
                let d = dy[idx] * gamma[chan(idx)];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * cache.normalized[idx];
            }
            let scale = cache.inv_std[gi] / count;
            for idx in range {
                let d = dy[idx] * gamma[chan(idx)];
                dx[idx] =
                    dx[idx] + scale * (count * d - sum_d - cache.normalized[idx] * sum_dx);
            }
        }
    }
}

/// Source taps of one output coordinate under half-pixel (align-corners=false) sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` receives `1 - frac`.
    pub frac: f64,
}

pub fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of every `[h, w]` plane in `x`.
pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<T> {
    let ty = resize_taps(in_h, out_h);
    let tx = resize_taps(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, t) in ty.iter().enumerate() {
            let fy = T::from_f64(t.frac);
            let gy = T::one() - fy;
            let r0 = &src[t.lo * in_w..(t.lo + 1) * in_w];
            let r1 = &src[t.hi * in_w..(t.hi + 1) * in_w];
            for (ox, s) in tx.iter().enumerate() {
                let fx = T::from_f64(s.frac);
                let gx = T::one() - fx;
                let top = gx * r0[s.lo] + fx * r0[s.hi];
                let bottom = gx * r1[s.lo] + fx * r1[s.hi];
                dst[oy * out_w + ox] = gy * top + fy * bottom;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_forward`], accumulating into `dx`.
pub fn bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    dx: &mut [T],
) {
    let ty = resize_taps(in_h, out_h);
    let tx = resize_taps(in_w, out_w);
    for p in 0..planes {
        let src = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, t) in ty.iter().enumerate() {
            let fy = T::from_f64(t.frac);
            let gy = T::one() - fy;
            for (ox, s) in tx.iter().enumerate() {
                let fx = T::from_f64(s.frac);
                let gx = T::one() - fx;
                let g = src[oy * out_w + ox];
                dst[t.lo * in_w + s.lo] = dst[t.lo * in_w + s.lo] + gy * gx * g;
                dst[t.lo * in_w + s.hi] = dst[t.lo * in_w + s.hi] + gy * fx * g;
                dst[t.hi * in_w + s.lo] = dst[t.hi * in_w + s.lo] + fy * gx * g;
                dst[t.hi * in_w + s.hi] = dst[t.hi * in_w + s.hi] + fy * fx * g;
            }
        }
    }
}

/// Max-subtracted softmax over the channel axis of `[B, C, H, W]`.
pub fn softmax_channels<T: Scalar>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [batch, channels, h, w] = dims;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let base = b * channels * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let max = (0..channels).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..channels {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total = total + e;
            }
            for c in 0..channels {
                out[at(c)] = out[at(c)] / total;
            }
        }
    }
    out
}
