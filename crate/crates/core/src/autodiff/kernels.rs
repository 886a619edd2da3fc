//! Dense kernels behind the convolution and linear ops. Convolutions are
//! lowered to GEMM through a causal im2col gather and its adjoint scatter.

use super::Real;
use crate::error::{Error, Result};

/// Kernel geometry of a causal 2-D convolution over `[time, channel, freq]`.
///
/// Tap `k` of the time kernel reads frame `t - (kt - 1 - k) * dilation`, so the
/// last tap is the current frame and the input is implicitly left-padded with
/// `(kt - 1) * dilation` zero frames. Frequency is valid-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kt: usize,
    pub kf: usize,
    pub stride_f: usize,
    pub dilation_t: usize,
}

impl ConvGeom {
    pub const fn pointwise() -> Self {
        Self {
            kt: 1,
            kf: 1,
            stride_f: 1,
            dilation_t: 1,
        }
    }

    pub fn taps(&self) -> usize {
        self.kt * self.kf
    }

    /// How many frames back the kernel reaches.
    pub fn lookback(&self) -> usize {
        (self.kt - 1) * self.dilation_t
    }
}

pub fn conv_out_len(f_in: usize, kf: usize, stride: usize) -> Result<usize> {
    if kf > f_in {
        return Err(Error::shape(format!(
            "frequency kernel {kf} wider than input {f_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    Ok((f_in - kf) / stride + 1)
}

/// Extra trailing bins a transposed convolution must emit to land on
/// `f_out`; only 0 or `stride - 1` extra bins are meaningful.
pub fn tconv_output_padding(f_in: usize, f_out: usize, kf: usize, stride: usize) -> Result<usize> {
    let base = (f_in.saturating_sub(1)) * stride + kf;
    if f_in == 0 || f_out < base || f_out - base >= stride.max(1) {
        return Err(Error::shape(format!(
            "transposed conv cannot map {f_in} bins to {f_out} (kernel {kf}, stride {stride})"
        )));
    }
    Ok(f_out - base)
}

/// Time direction of the im2col shift: convolutions read the past, the
/// transposed scatter writes into the future of its input frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shift {
    Past,
    Future,
}

/// Layout descriptor of the array gathered from / scattered into.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lowering {
    pub frames: usize,
    pub channels: usize,
    /// Bins of the `[frames, channels, bins]` array.
    pub bins: usize,
    /// Number of kernel anchor positions along frequency.
    pub anchors: usize,
    pub geom: ConvGeom,
    pub shift: Shift,
}

impl Lowering {
    pub fn rows(&self) -> usize {
        self.channels * self.geom.taps()
    }

    pub fn cols(&self) -> usize {
        self.frames * self.anchors
    }

    #[inline]
    fn source_frame(&self, t: usize, k: usize) -> Option<usize> {
        let off = (self.geom.kt - 1 - k) * self.geom.dilation_t;
        match self.shift {
            Shift::Past => t.checked_sub(off),
            Shift::Future => Some(t + off).filter(|&s| s < self.frames),
        }
    }
}

/// `cols[(c, k, j)][t * anchors + g] = x[src(t, k), c, g * stride + j]`.
pub(crate) fn im2col<T: Real>(x: &[T], lw: &Lowering) -> Vec<T> {
    let g = lw.geom;
    let ncols = lw.cols();
    let mut cols = vec![T::zero(); lw.rows() * ncols];
    for c in 0..lw.channels {
        for k in 0..g.kt {
            for j in 0..g.kf {
                let r = (c * g.kt + k) * g.kf + j;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for t in 0..lw.frames {
                    let Some(src) = lw.source_frame(t, k) else {
                        continue;
                    };
                    let base = (src * lw.channels + c) * lw.bins + j;
                    let dst = &mut row[t * lw.anchors..(t + 1) * lw.anchors];
                    if g.stride_f == 1 {
                        dst.copy_from_slice(&x[base..base + lw.anchors]);
                    } else {
                        for (a, d) in dst.iter_mut().enumerate() {
                            *d = x[base + a * g.stride_f];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im_add<T: Real>(cols: &[T], lw: &Lowering, x: &mut [T]) {
    let g = lw.geom;
    let ncols = lw.cols();
    for c in 0..lw.channels {
        for k in 0..g.kt {
            for j in 0..g.kf {
                let r = (c * g.kt + k) * g.kf + j;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for t in 0..lw.frames {
                    let Some(src) = lw.source_frame(t, k) else {
                        continue;
                    };
                    let base = (src * lw.channels + c) * lw.bins + j;
                    let from = &row[t * lw.anchors..(t + 1) * lw.anchors];
                    for (a, v) in from.iter().enumerate() {
                        x[base + a * g.stride_f] += *v;
                    }
                }
            }
        }
    }
}

/// `[frames, channels, bins]` to `[channels, frames * bins]`.
pub(crate) fn tcf_to_cn<T: Real>(x: &[T], frames: usize, channels: usize, bins: usize) -> Vec<T> {
    let n = frames * bins;
    let mut out = vec![T::zero(); channels * n];
    for t in 0..frames {
        for c in 0..channels {
            let src = &x[(t * channels + c) * bins..(t * channels + c + 1) * bins];
            out[c * n + t * bins..c * n + (t + 1) * bins].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`tcf_to_cn`], adding `bias[c]` (if any) to every element.
pub(crate) fn cn_to_tcf<T: Real>(
    x: &[T],
    frames: usize,
    channels: usize,
    bins: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let n = frames * bins;
    let mut out = vec![T::zero(); frames * channels * bins];
    for c in 0..channels {
        let b = bias.map_or(T::zero(), |b| b[c]);
        for t in 0..frames {
            let src = &x[c * n + t * bins..c * n + (t + 1) * bins];
            let dst = &mut out[(t * channels + c) * bins..(t * channels + c + 1) * bins];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    out
}

/// Strided matrix view: `(data, row stride, col stride)`.
pub(crate) type View<'a, T> = (&'a [T], usize, usize);

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c (m x n, row-major, contiguous) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(max_index(m, k, a.1, a.2) < a.0.len(), "gemm lhs out of bounds");
    assert!(max_index(k, n, b.1, b.2) < b.0.len(), "gemm rhs out of bounds");
    // SAFETY: bounds of every addressed element were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
