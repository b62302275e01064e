//! Raw loops behind the graph operations. All inputs are contiguous
//! channels-first planes; nothing here allocates except where noted.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the column matrix is the input plane itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit.
pub(crate) fn conv_out(len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Unfolds one image (`C × H × W`) into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let off = (kj * g.dilation) as isize - g.pad as isize;
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + off < width
                        let lo = (-off).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize - off).clamp(0, g.out_w as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + off) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
                        }
                        out_row[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + off;
                            *o = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image,
/// accumulating into `img`.
pub(crate) fn col2im_acc<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let in_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let off = (kj * g.dilation) as isize - g.pad as isize;
                    if g.stride == 1 {
                        let lo = (-off).clamp(0, g.out_w as isize) as usize;
                        let hi = (g.width as isize - off).clamp(0, g.out_w as isize) as usize;
                        if hi > lo {
                            let s = (lo as isize + off) as usize;
                            for (d, &v) in dst[s..s + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2×2 stride-2 max pooling of one plane; returns the flat input index of
/// each window's maximum (first wins ties, row-major inside the window).
pub(crate) fn maxpool2x_plane<T: Real>(src: &[T], h: usize, w: usize, dst: &mut [T], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = 2 * oy * w + 2 * ox;
            let mut best = base;
            for idx in [base + 1, base + w, base + w + 1] {
                if src[idx] > src[best] {
                    best = idx;
                }
            }
            dst[oy * ow + ox] = src[best];
            arg[oy * ow + ox] = best as u32;
        }
    }
}

/// Source taps for bilinear 2× upsampling along one axis (half-pixel
/// centres, clamped at the border): `(lo, hi, weight_hi)`.
pub(crate) fn bilinear_taps(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let lo = (src as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let frac = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn geom(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, d: usize) -> ConvGeom {
        ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh: k,
            kw: k,
            stride: s,
            pad: p,
            dilation: d,
            out_h: conv_out(h, k, s, p, d).unwrap(),
            out_w: conv_out(w, k, s, p, d).unwrap(),
        }
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out(4, 3, 1, 1, 1), Some(4));
        assert_eq!(conv_out(5, 3, 2, 1, 1), Some(3));
        assert_eq!(conv_out(3, 3, 2, 1, 1), Some(2));
        assert_eq!(conv_out(8, 3, 1, 0, 2), Some(4));
        assert_eq!(conv_out(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        for &(s, p, d) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)] {
            let g = geom(2, 5, 6, 3, s, p, d);
            let x: alloc::vec::Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let y: alloc::vec::Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
            let mut cols = vec![0.0; g.rows() * g.cols()];
            im2col(&g, &x, &mut cols);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im_acc(&g, &y, &mut back);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let src = [1.0f32, 1.0, 1.0, 1.0];
        let mut dst = [0.0; 1];
        let mut arg = [9; 1];
        maxpool2x_plane(&src, 2, 2, &mut dst, &mut arg);
        assert_eq!((dst[0], arg[0]), (1.0, 0));
    }
}
