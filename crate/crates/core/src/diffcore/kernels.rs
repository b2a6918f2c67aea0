//! Raw slice kernels shared by the forward and backward rules in `graph`.

/// Row-major matrix view: `rows x cols`, optionally read transposed.
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
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
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

/// `out = a·b + beta·out`, with `out` row-major `m x n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides describe exactly the row-major buffers whose lengths
    // were checked above; `out` is a distinct mutable slice of length m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` image into a `[C*kh*kw, out_h*out_w]` column matrix.
#[cfg(test)]
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    im2col_strided(g, image, cols, g.positions(), 0);
}

/// Output columns `lo..hi` whose input column `ox*stride + k - pad` lies inside `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// [`im2col`] into columns `offset..offset + positions` of a matrix whose rows are `ld` long.
pub(crate) fn im2col_strided(g: &ConvGeom, image: &[f64], cols: &mut [f64], ld: usize, offset: usize) {
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + positions];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < y_lo || oy >= y_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    if x_lo < x_hi {
                        let ix0 = x_lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for (j, slot) in line[x_lo..x_hi].iter_mut().enumerate() {
                                *slot = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
#[cfg(test)]
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    col2im_strided(g, cols, image, g.positions(), 0);
}

/// Adjoint of [`im2col_strided`].
pub(crate) fn col2im_strided(g: &ConvGeom, cols: &[f64], image: &mut [f64], ld: usize, offset: usize) {
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ky, g.padding, g.stride, g.height, g.out_h);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kx, g.padding, g.stride, g.width, g.out_w);
                if x_lo >= x_hi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + offset..row * ld + offset + positions];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    let ix0 = x_lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        dst[ix0..ix0 + line.len()].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over one plane; records the flat argmax of each window
/// (first occurrence in row-major scan order on ties).
pub(crate) fn maxpool_plane(
    plane: &[f64],
    width: usize,
    window: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = 0;
            for ky in 0..window {
                for kx in 0..window {
                    let at = (oy * stride + ky) * width + ox * stride + kx;
                    if plane[at] > best {
                        best = plane[at];
                        best_at = at;
                    }
                }
            }
            out[oy * out_w + ox] = best;
            argmax[oy * out_w + ox] = best_at;
        }
    }
}

/// Align-corners source coordinate: lower index, upper index, upper weight.
pub(crate) fn align_corners_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), &mut out, 0.0);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), &mut out, 0.0);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2).t(), &mut out, 1.0);
        assert_eq!(out, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    fn naive_im2col(g: &ConvGeom, image: &[f64]) -> Vec<f64> {
        let mut cols = Vec::new();
        for c in 0..g.channels {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            let inside = iy >= 0 && ix >= 0 && iy < g.height as isize && ix < g.width as isize;
                            cols.push(if inside {
                                image[(c * g.height + iy as usize) * g.width + ix as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, padding) in [(5, 4, 3, 1, 1), (5, 4, 3, 2, 1), (6, 6, 1, 1, 0), (3, 7, 3, 2, 2), (2, 2, 3, 1, 2)] {
            let out = |len: usize| (len + 2 * padding - k) / stride + 1;
            let g = ConvGeom {
                channels: 2,
                height: h,
                width: w,
                kh: k,
                kw: k,
                stride,
                padding,
                out_h: out(h),
                out_w: out(w),
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.patch_len() * g.positions()];
            im2col(&g, &x, &mut cols);
            assert_eq!(cols, naive_im2col(&g, &x), "{h}x{w} k{k} s{stride} p{padding}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
