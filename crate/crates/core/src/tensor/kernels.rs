//! Raw numeric kernels shared by the forward and backward passes.

use serde::{Deserialize, Serialize};

/// `sqrt(2 / pi)`, the scale inside the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Strided operand view for [`gemm`]: `(row stride, column stride)`.
pub(crate) type Strides = (usize, usize);

/// `c (+)= a · b` where `a` is `m×k`, `b` is `k×n`, and `c` is a contiguous
/// row-major `m×n` block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len(), "gemm lhs out of bounds");
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len(), "gemm rhs out of bounds");
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, sa, b, sb, c, accumulate);
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given extents and strides; `c` is exclusively borrowed and contiguous.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds the packing buffers of the blocked kernel
/// cost more than the arithmetic.
const SMALL_GEMM: usize = 1 << 13;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    accumulate: bool,
) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for p in 0..k {
            let x = a[i * sa.0 + p * sa.1];
            for (j, out) in row.iter_mut().enumerate() {
                *out += x * b[p * sb.0 + j * sb.1];
            }
        }
    }
}

/// Pooling reduction applied inside each stride-sized window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

pub fn pooled_extent(dim: usize, stride: usize) -> usize {
    dim.div_ceil(stride)
}

/// Non-overlapping window pooling over the three leading axes of
/// `[l, h, m, c]`. Trailing partial windows reduce over the elements they
/// actually cover. Returns the output and, for max pooling, the source index
/// of every output element.
pub(crate) fn pool3d(
    x: &[f64],
    dims: [usize; 3],
    channels: usize,
    stride: [usize; 3],
    kind: PoolKind,
) -> (Vec<f64>, Vec<usize>) {
    let out_dims =
        [pooled_extent(dims[0], stride[0]), pooled_extent(dims[1], stride[1]), pooled_extent(dims[2], stride[2])];
    let mut out = vec![0.0; out_dims.iter().product::<usize>() * channels];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; out.len()],
        PoolKind::Avg => Vec::new(),
    };
    for ot in 0..out_dims[0] {
        for oh in 0..out_dims[1] {
            for ow in 0..out_dims[2] {
                let obase = ((ot * out_dims[1] + oh) * out_dims[2] + ow) * channels;
                let t_range = ot * stride[0]..((ot + 1) * stride[0]).min(dims[0]);
                let h_range = oh * stride[1]..((oh + 1) * stride[1]).min(dims[1]);
                let w_range = ow * stride[2]..((ow + 1) * stride[2]).min(dims[2]);
                let count = t_range.len() * h_range.len() * w_range.len();
                for c in 0..channels {
                    let mut acc = match kind {
                        PoolKind::Avg => 0.0,
                        PoolKind::Max => f64::NEG_INFINITY,
                    };
                    let mut best = 0;
                    for t in t_range.clone() {
                        for h in h_range.clone() {
                            for w in w_range.clone() {
                                let idx = ((t * dims[1] + h) * dims[2] + w) * channels + c;
                                match kind {
                                    PoolKind::Avg => acc += x[idx],
                                    PoolKind::Max => {
                                        if x[idx] > acc {
                                            acc = x[idx];
                                            best = idx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Avg => out[obase + c] = acc / count as f64,
                        PoolKind::Max => {
                            out[obase + c] = acc;
                            argmax[obase + c] = best;
                        }
                    }
                }
            }
        }
    }
    (out, argmax)
}

/// Scatters the gradient of an average pooling back over its windows.
pub(crate) fn avg_pool3d_backward(g: &[f64], dims: [usize; 3], channels: usize, stride: [usize; 3], dx: &mut [f64]) {
    let out_dims =
        [pooled_extent(dims[0], stride[0]), pooled_extent(dims[1], stride[1]), pooled_extent(dims[2], stride[2])];
    for t in 0..dims[0] {
        let ot = t / stride[0];
        let ct = ((ot + 1) * stride[0]).min(dims[0]) - ot * stride[0];
        for h in 0..dims[1] {
            let oh = h / stride[1];
            let ch = ((oh + 1) * stride[1]).min(dims[1]) - oh * stride[1];
            for w in 0..dims[2] {
                let ow = w / stride[2];
                let cw = ((ow + 1) * stride[2]).min(dims[2]) - ow * stride[2];
                let inv = 1.0 / (ct * ch * cw) as f64;
                let obase = ((ot * out_dims[1] + oh) * out_dims[2] + ow) * channels;
                let ibase = ((t * dims[1] + h) * dims[2] + w) * channels;
                for c in 0..channels {
                    dx[ibase + c] += g[obase + c] * inv;
                }
            }
        }
    }
}

/// Per-channel 3D convolution with zero "same" padding on `[t, h, w, c]`.
pub(crate) fn dwconv3d(x: &[f64], dims: [usize; 3], kernel: &[f64], kdims: [usize; 3], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let pad = [kdims[0] / 2, kdims[1] / 2, kdims[2] / 2];
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let obase = ((t * dims[1] + h) * dims[2] + w) * channels;
                for a in 0..kdims[0] {
                    let Some(st) = shifted(t, a, pad[0], dims[0]) else { continue };
                    for b in 0..kdims[1] {
                        let Some(sh) = shifted(h, b, pad[1], dims[1]) else { continue };
                        for d in 0..kdims[2] {
                            let Some(sw) = shifted(w, d, pad[2], dims[2]) else { continue };
                            let ibase = ((st * dims[1] + sh) * dims[2] + sw) * channels;
                            let kbase = ((a * kdims[1] + b) * kdims[2] + d) * channels;
                            for c in 0..channels {
                                out[obase + c] += x[ibase + c] * kernel[kbase + c];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`dwconv3d`] with respect to the input and the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv3d_backward(
    g: &[f64],
    x: &[f64],
    dims: [usize; 3],
    kernel: &[f64],
    kdims: [usize; 3],
    channels: usize,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let pad = [kdims[0] / 2, kdims[1] / 2, kdims[2] / 2];
    let mut dx = dx;
    let mut dk = dk;
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let obase = ((t * dims[1] + h) * dims[2] + w) * channels;
                for a in 0..kdims[0] {
                    let Some(st) = shifted(t, a, pad[0], dims[0]) else { continue };
                    for b in 0..kdims[1] {
                        let Some(sh) = shifted(h, b, pad[1], dims[1]) else { continue };
                        for d in 0..kdims[2] {
                            let Some(sw) = shifted(w, d, pad[2], dims[2]) else { continue };
                            let ibase = ((st * dims[1] + sh) * dims[2] + sw) * channels;
                            let kbase = ((a * kdims[1] + b) * kdims[2] + d) * channels;
                            for c in 0..channels {
                                let go = g[obase + c];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[ibase + c] += go * kernel[kbase + c];
                                }
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[kbase + c] += go * x[ibase + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn shifted(pos: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
    let s = (pos + tap).checked_sub(pad)?;
    (s < extent).then_some(s)
}
