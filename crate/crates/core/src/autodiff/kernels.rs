//! Dense kernels shared by the forward and adjoint rules.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major matrix operand: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn out_rows(&self) -> usize {
        if self.transposed {
            self.cols
        } else {
            self.rows
        }
    }

    fn out_cols(&self) -> usize {
        if self.transposed {
            self.rows
        } else {
            self.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `a * b` into a freshly allocated row-major buffer.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>) -> Vec<f64> {
    let len = a.out_rows() * b.out_cols();
    let mut c: Vec<f64> = Vec::with_capacity(len);
    let k = a.out_cols();
    if len == 0 || k == 0 {
        c.resize(len, 0.0);
        return c;
    }
    assert_eq!(k, b.out_rows(), "gemm inner dimensions");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: operand strides stay inside the slices (checked by `Mat::new`);
    // with beta = 0 the kernel only writes C, and all `len` entries are written
    // before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            a.out_rows(),
            k,
            b.out_cols(),
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            b.out_cols() as isize,
            1,
        );
        c.set_len(len);
    }
    c
}

/// Geometry of a 2-D convolution from an `h x w` plane to `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `channels x h x w` image into columns `[rows, ld]` starting at column `col0`.
/// Range `[lo, hi)` of output indices `o < out` with `0 <= o * stride + offset < limit`.
fn valid_range(out: usize, stride: usize, offset: isize, limit: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let bound = limit as isize - offset;
    let hi = if bound <= 0 {
        0
    } else {
        (bound as usize).div_ceil(stride)
    };
    let lo = lo.min(out);
    (lo, hi.min(out).max(lo))
}

/// Unfolds `n` images (`[n, channels, h, w]`) into a `[rows, n * positions]` matrix.
pub(crate) fn im2col(img: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, hw, p) = (g.k, g.h * g.w, g.positions());
    let chw = g.channels * hw;
    let mut cols = Vec::with_capacity(g.rows() * n * p);
    for c in 0..g.channels {
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.stride, ki as isize - g.pad as isize, g.h);
            for kj in 0..k {
                let offset = kj as isize - g.pad as isize;
                let (ox_lo, ox_hi) = valid_range(g.ow, g.stride, offset, g.w);
                let run = ox_hi - ox_lo;
                for s in 0..n {
                    let plane = &img[s * chw + c * hw..s * chw + (c + 1) * hw];
                    cols.resize(cols.len() + oy_lo * g.ow, 0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let line = &plane[iy * g.w..(iy + 1) * g.w];
                        cols.resize(cols.len() + ox_lo, 0.0);
                        if run > 0 {
                            let start = (ox_lo * g.stride) as isize + offset;
                            let src = &line[start as usize..];
                            if g.stride == 1 {
                                cols.extend_from_slice(&src[..run]);
                            } else {
                                cols.extend(src.iter().step_by(g.stride).take(run));
                            }
                        }
                        cols.resize(cols.len() + g.ow - ox_hi, 0.0);
                    }
                    cols.resize(cols.len() + (g.oh - oy_hi) * g.ow, 0.0);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a `[rows, n * positions]` matrix back into `n` images.
pub(crate) fn col2im(cols: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, hw, p) = (g.k, g.h * g.w, g.positions());
    let chw = g.channels * hw;
    let ld = n * p;
    let mut img = vec![0.0; n * chw];
    for c in 0..g.channels {
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.oh, g.stride, ki as isize - g.pad as isize, g.h);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let offset = kj as isize - g.pad as isize;
                let (ox_lo, ox_hi) = valid_range(g.ow, g.stride, offset, g.w);
                if ox_hi == ox_lo {
                    continue;
                }
                let start = ((ox_lo * g.stride) as isize + offset) as usize;
                for s in 0..n {
                    let src = &cols[row * ld + s * p..row * ld + (s + 1) * p];
                    let plane = &mut img[s * chw + c * hw..s * chw + (c + 1) * hw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst = &mut plane[iy * g.w + start..(iy + 1) * g.w];
                        let line = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                        if g.stride == 1 {
                            dst.iter_mut().zip(line).for_each(|(d, v)| *d += v);
                        } else {
                            dst.iter_mut().step_by(g.stride).zip(line).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
        }
    }
    img
}

/// `[n, c, p]` -> `[c, n * p]`.
pub(crate) fn batch_to_channel_major(src: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * p];
    for s in 0..n {
        for ch in 0..c {
            let from = &src[(s * c + ch) * p..(s * c + ch + 1) * p];
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(from);
        }
    }
    out
}

/// `[c, n * p]` -> `[n, c, p]`.
pub(crate) fn channel_to_batch_major(src: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * p];
    for ch in 0..c {
        for s in 0..n {
            let from = &src[ch * n * p + s * p..ch * n * p + (s + 1) * p];
            out[(s * c + ch) * p..(s * c + ch + 1) * p].copy_from_slice(from);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let c = gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * a (2x3)
        let d = gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3));
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert_eq!(d[i * 3 + j], want);
            }
        }
        assert_eq!(gemm(Mat::new(&[], 2, 0), Mat::new(&[], 0, 3)), vec![0.0; 6]);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (3, 1, 0)] {
            let g = ConvGeom::new(2, 5, 6, k, stride, pad).unwrap();
            let n = 3;
            let img: Vec<f64> = (0..n * 60).map(|v| v as f64 + 1.0).collect();
            let cols = im2col(&img, n, &g);
            let ld = n * g.positions();
            for c in 0..2 {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        for s in 0..n {
                            for oy in 0..g.oh {
                                for ox in 0..g.ow {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    let want = if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        0.0
                                    } else {
                                        img[s * 60 + c * 30 + iy as usize * 6 + ix as usize]
                                    };
                                    assert_eq!(cols[row * ld + s * g.positions() + oy * g.ow + ox], want);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..40).map(|v| libm::sin(v as f64)).collect();
        let cols_probe: Vec<f64> = (0..g.rows() * g.positions())
            .map(|v| libm::cos(v as f64 * 0.3))
            .collect();
        let cols = im2col(&img, 1, &g);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let back = col2im(&cols_probe, 1, &g);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
