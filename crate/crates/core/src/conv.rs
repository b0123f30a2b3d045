//! Patch extraction: the bridge that turns a convolution into a linear
//! model over receptive fields.
//!
//! A `C x H x W` input is unrolled into a matrix with one row per output
//! position and one column per (channel, kernel row, kernel col) triple,
//! channel-major. Multiplying by a `(C*kh*kw) x out_channels` filter
//! matrix then reproduces the convolution exactly; that layout is fixed
//! here and the filter reshape in the network module must match it.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Geometry of one convolution: input tensor dims, kernel, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.in_height == 0
            || self.in_width == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
        {
            return Err(Error::GeometryMismatch("zero dimension".into()));
        }
        if self.in_height + 2 * self.padding < self.kernel_h
            || self.in_width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::GeometryMismatch(
                "kernel larger than padded input".into(),
            ));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Number of output positions per channel.
    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one flattened receptive field.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Flattened input tensor length.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }
}

/// Unrolls a flattened `C x H x W` tensor into its patch matrix.
///
/// Row `p` (with `p = oy * out_w + ox`) holds the receptive field at
/// output position `(oy, ox)`, flattened channel-major; positions outside
/// the input are zero (padding).
pub fn im2col(input: &DenseMatrix, geom: &PatchGeometry) -> Result<DenseMatrix> {
    geom.validate()?;
    if input.rows() * input.cols() != geom.input_len() {
        return Err(Error::GeometryMismatch(format!(
            "input has {} entries, geometry wants {}",
            input.rows() * input.cols(),
            geom.input_len()
        )));
    }
    Ok(im2col_slice(input.data(), geom))
}

/// As [`im2col`] but on a raw slice already known to have the right length.
pub(crate) fn im2col_slice(input: &[f64], geom: &PatchGeometry) -> DenseMatrix {
    debug_assert_eq!(input.len(), geom.input_len());
    let (out_h, out_w) = (geom.out_height(), geom.out_width());
    let cols = geom.patch_len();
    let mut out = DenseMatrix::zeros(out_h * out_w, cols);
    let (h, w, p, s) = (geom.in_height, geom.in_width, geom.padding, geom.stride);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = out.row_mut(oy * out_w + ox);
            let mut idx = 0;
            for c in 0..geom.in_channels {
                let chan = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..geom.kernel_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for kx in 0..geom.kernel_w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            row[idx] = chan[iy as usize * w + ix as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_slice`]: scatter-adds patch-matrix gradients back
/// onto the flattened input tensor.
pub(crate) fn col2im_slice(patch_grad: &DenseMatrix, geom: &PatchGeometry) -> Vec<f64> {
    debug_assert_eq!(patch_grad.rows(), geom.out_positions());
    debug_assert_eq!(patch_grad.cols(), geom.patch_len());
    let mut input_grad = vec![0.0; geom.input_len()];
    let (out_h, out_w) = (geom.out_height(), geom.out_width());
    let (h, w, p, s) = (geom.in_height, geom.in_width, geom.padding, geom.stride);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = patch_grad.row(oy * out_w + ox);
            let mut idx = 0;
            for c in 0..geom.in_channels {
                for ky in 0..geom.kernel_h {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for kx in 0..geom.kernel_w {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            input_grad[c * h * w + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    input_grad
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct nested-loop convolution over one tensor; the oracle every
    /// patch-based path is checked against.
    pub(crate) fn direct_conv(
        input: &[f64],
        geom: &PatchGeometry,
        filter: &DenseMatrix, // patch_len x out_channels
        bias: &[f64],
    ) -> Vec<f64> {
        let (out_h, out_w) = (geom.out_height(), geom.out_width());
        let out_channels = filter.cols();
        let (h, w, p, s) = (geom.in_height, geom.in_width, geom.padding, geom.stride);
        let mut out = vec![0.0; out_channels * out_h * out_w];
        for o in 0..out_channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias[o];
                    for c in 0..geom.in_channels {
                        for ky in 0..geom.kernel_h {
                            for kx in 0..geom.kernel_w {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    let fidx = c * geom.kernel_h * geom.kernel_w
                                        + ky * geom.kernel_w
                                        + kx;
                                    acc += input[c * h * w + iy as usize * w + ix as usize]
                                        * filter.get(fidx, o);
                                }
                            }
                        }
                    }
                    out[o * out_h * out_w + oy * out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn four_windows_of_a_3x3() {
        let geom = PatchGeometry {
            in_channels: 1,
            in_height: 3,
            in_width: 3,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let input =
            DenseMatrix::from_vec(1, 9, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let m = im2col(&input, &geom).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        assert_eq!(m.row(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(m.row(2), &[4.0, 5.0, 7.0, 8.0]);
        assert_eq!(m.row(3), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn single_pixel_identity() {
        let geom = PatchGeometry {
            in_channels: 1,
            in_height: 1,
            in_width: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let input = DenseMatrix::from_vec(1, 1, vec![3.25]).unwrap();
        let m = im2col(&input, &geom).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert_eq!(m.get(0, 0), 3.25);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let geom = PatchGeometry {
            in_channels: 2,
            in_height: 3,
            in_width: 3,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let input = DenseMatrix::zeros(1, 9); // needs 18 entries
        assert!(matches!(
            im2col(&input, &geom),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn matches_direct_convolution_with_padding() {
        let geom = PatchGeometry {
            in_channels: 2,
            in_height: 4,
            in_width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let mut rng = Rng::new(77);
        let input = rng.gaussian_matrix(1, geom.input_len(), 0.0, 1.0);
        let filter = rng.gaussian_matrix(geom.patch_len(), 3, 0.0, 1.0);
        let bias = vec![0.1, -0.2, 0.3];

        let patches = im2col(&input, &geom).unwrap();
        let z = patches.matmul(&filter); // out_positions x out_channels
        let direct = direct_conv(input.data(), &geom, &filter, &bias);
        for o in 0..3 {
            for p in 0..geom.out_positions() {
                let via_patches = z.get(p, o) + bias[o];
                let d = direct[o * geom.out_positions() + p];
                assert!((via_patches - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randomized_suite_small_dims() {
        let mut rng = Rng::new(4242);
        let mut cases = 0;
        for c in 1..=3usize {
            for h in 1..=5usize {
                for k in 1..=3usize {
                    for s in 1..=2usize {
                        for p in 0..=1usize {
                            if h + 2 * p < k {
                                continue;
                            }
                            let geom = PatchGeometry {
                                in_channels: c,
                                in_height: h,
                                in_width: h,
                                kernel_h: k,
                                kernel_w: k,
                                stride: s,
                                padding: p,
                            };
                            let input = rng.gaussian_matrix(1, geom.input_len(), 0.0, 1.0);
                            let filter = rng.gaussian_matrix(geom.patch_len(), 2, 0.0, 1.0);
                            let z = im2col(&input, &geom).unwrap().matmul(&filter);
                            let direct = direct_conv(input.data(), &geom, &filter, &[0.0, 0.0]);
                            for o in 0..2 {
                                for pos in 0..geom.out_positions() {
                                    let diff =
                                        (z.get(pos, o) - direct[o * geom.out_positions() + pos]).abs();
                                    assert!(diff < 1e-12);
                                }
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
        assert!(cases >= 100, "only {cases} geometry cases exercised");
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let geom = PatchGeometry {
            in_channels: 2,
            in_height: 3,
            in_width: 4,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 1,
        };
        let mut rng = Rng::new(8);
        let x = rng.gaussian_matrix(1, geom.input_len(), 0.0, 1.0);
        let y = rng.gaussian_matrix(geom.out_positions(), geom.patch_len(), 0.0, 1.0);
        let px = im2col_slice(x.data(), &geom);
        let lhs: f64 = px.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im_slice(&y, &geom);
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
