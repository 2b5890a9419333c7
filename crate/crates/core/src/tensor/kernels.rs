//! Raw loops behind the tape operations. No shape validation happens here.

use super::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    /// Input coordinate sampled by output position `o` and tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds the input into a `rows × patch` matrix; taps outside are zero.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let off = (ky * g.kw + kx) * g.in_c;
                        dst[off..off + g.in_c].copy_from_slice(&input[src..src + g.in_c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `rows × patch` gradient matrix back onto the input layout.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, grad_input: &mut [T]) {
    let patch = g.patch();
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src_row = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let off = (ky * g.kw + kx) * g.in_c;
                        for (d, &s) in
                            grad_input[dst..dst + g.in_c].iter_mut().zip(&src_row[off..off + g.in_c])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and the unfolded input.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let rows = g.rows();
    let mut out = vec![T::zero(); rows * g.out_c];
    for row in out.chunks_exact_mut(g.out_c) {
        row.copy_from_slice(bias);
    }
    gemm(&cols, false, weight, false, &mut out, rows, g.patch(), g.out_c, true);
    (out, cols)
}

/// In-place softmax over contiguous rows of length `c`, logits divided by `t`.
pub fn softmax_rows<T: Scalar>(data: &mut [T], c: usize, t: T) {
    for row in data.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / t).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Source index pair and weights for half-pixel-centre bilinear sampling.
#[derive(Clone, Copy, Debug)]
pub struct Lerp<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: T,
}

pub fn lerp_table<T: Scalar>(src: usize, dst: usize) -> Vec<Lerp<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Lerp { lo, hi, w_hi: T::lit(pos - lo as f64) }
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    input: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ys = lerp_table::<T>(h, oh);
    let xs = lerp_table::<T>(w, ow);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        let base = bi * h * w * c;
        for (oy, ly) in ys.iter().enumerate() {
            let wy = ly.w_hi;
            for (ox, lx) in xs.iter().enumerate() {
                let wx = lx.w_hi;
                let p00 = base + (ly.lo * w + lx.lo) * c;
                let p01 = base + (ly.lo * w + lx.hi) * c;
                let p10 = base + (ly.hi * w + lx.lo) * c;
                let p11 = base + (ly.hi * w + lx.hi) * c;
                let dst = ((bi * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let top = input[p00 + ch] + (input[p01 + ch] - input[p00 + ch]) * wx;
                    let bot = input[p10 + ch] + (input[p11 + ch] - input[p10 + ch]) * wx;
                    out[dst + ch] = top + (bot - top) * wy;
                }
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    grad_in: &mut [T],
) {
    let ys = lerp_table::<T>(h, oh);
    let xs = lerp_table::<T>(w, ow);
    for bi in 0..b {
        let base = bi * h * w * c;
        for (oy, ly) in ys.iter().enumerate() {
            let wy = ly.w_hi;
            for (ox, lx) in xs.iter().enumerate() {
                let wx = lx.w_hi;
                let taps = [
                    (ly.lo, lx.lo, (T::one() - wy) * (T::one() - wx)),
                    (ly.lo, lx.hi, (T::one() - wy) * wx),
                    (ly.hi, lx.lo, wy * (T::one() - wx)),
                    (ly.hi, lx.hi, wy * wx),
                ];
                let src = ((bi * oh + oy) * ow + ox) * c;
                for (y, x, wt) in taps {
                    let dst = base + (y * w + x) * c;
                    for ch in 0..c {
                        grad_in[dst + ch] += grad_out[src + ch] * wt;
                    }
                }
            }
        }
    }
}
