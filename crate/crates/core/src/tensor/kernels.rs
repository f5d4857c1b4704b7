//! Inner loops shared by the tape operations.
//!
//! Every reduction runs in a fixed order: eight interleaved partial sums
//! combined pairwise, then the scalar tail. The order depends only on the
//! slice length, so results are reproducible bit for bit.

use super::Real;

const LANES: usize = 8;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        let xb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut total = combine(&acc);
    for i in chunks * LANES..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l];
        }
    }
    let mut total = combine(&acc);
    for v in &a[chunks * LANES..] {
        total += *v;
    }
    total
}

#[inline]
fn combine<T: Real>(acc: &[T; LANES]) -> T {
    let a = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let b = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    a + b
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn input_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }
}

/// Unfolds one `[Cin, H, W]` sample into a `[Cin*kh*kw, Ho*Wo]` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto a `[Cin, H, W]` sample, accumulating.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, :] = sum_k kernel[co, k] * cols[k, :]` for one sample.
pub(crate) fn conv_forward_sample<T: Real>(g: &ConvGeom, kernel: &[T], cols: &[T], out: &mut [T]) {
    let k = g.patch_len();
    let p = g.positions();
    out.fill(T::ZERO);
    for co in 0..g.cout {
        let row = &mut out[co * p..(co + 1) * p];
        let wrow = &kernel[co * k..(co + 1) * k];
        for (ki, &wv) in wrow.iter().enumerate() {
            axpy(wv, &cols[ki * p..(ki + 1) * p], row);
        }
    }
}
