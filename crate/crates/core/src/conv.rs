//! Patch extraction for convolution-as-matmul.
//!
//! A kernel with `J` output channels is stored as a `J × (C·kh·kw)` matrix whose
//! column index is `c·kh·kw + ky·kw + kx`. [`im2col`] lays out patches so that
//! `kernel × im2col(image)` is the `J × (out_h·out_w)` convolution output.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Geometry of a 2-D convolution over a `channels × height × width` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 || channels == 0 {
            return Err(Error::shape("kernel dims, stride and channels must be >= 1"));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(Error::shape(format!(
                "{kh}x{kw} kernel exceeds padded {}x{} input",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Number of output pixels per channel.
    pub fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unrolled patch, `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source offset in the `C×H×W` image for patch element `k` of output pixel `(oy, ox)`,
    /// or `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, k: usize, oy: usize, ox: usize) -> Option<usize> {
        let c = k / (self.kh * self.kw);
        let ky = (k / self.kw) % self.kh;
        let kx = k % self.kw;
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return None;
        }
        Some((c * self.height + y as usize) * self.width + x as usize)
    }
}

/// Unrolls a single `C×H×W` image into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub fn im2col(image: &[f64], geom: &ConvGeometry) -> Result<DenseMatrix> {
    if image.len() != geom.input_len() {
        return Err(Error::shape(format!(
            "image has {} values, geometry expects {}",
            image.len(),
            geom.input_len()
        )));
    }
    let (ow, pixels) = (geom.out_w(), geom.pixels());
    let mut out = DenseMatrix::zeros(geom.patch_len(), pixels);
    let data = out.as_mut_slice();
    for k in 0..geom.patch_len() {
        for p in 0..pixels {
            if let Some(src) = geom.source(k, p / ow, p % ow) {
                data[k * pixels + p] = image[src];
            }
        }
    }
    Ok(out)
}

/// Batched variant with one patch per row: `(B·P) × K`, row `b·P + p`.
pub(crate) fn im2row_batch(input: &DenseMatrix, geom: &ConvGeometry) -> DenseMatrix {
    let batch = input.rows();
    let (ow, pixels, k_len) = (geom.out_w(), geom.pixels(), geom.patch_len());
    let mut out = DenseMatrix::zeros(batch * pixels, k_len);
    let data = out.as_mut_slice();
    for b in 0..batch {
        let image = input.row(b);
        for p in 0..pixels {
            let row = &mut data[(b * pixels + p) * k_len..(b * pixels + p + 1) * k_len];
            for (k, slot) in row.iter_mut().enumerate() {
                if let Some(src) = geom.source(k, p / ow, p % ow) {
                    *slot = image[src];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2row_batch`]: scatters patch gradients back onto images.
pub(crate) fn row2im_batch(grad: &DenseMatrix, geom: &ConvGeometry, batch: usize) -> DenseMatrix {
    let (ow, pixels, k_len) = (geom.out_w(), geom.pixels(), geom.patch_len());
    let mut out = DenseMatrix::zeros(batch, geom.input_len());
    let cols = geom.input_len();
    let data = out.as_mut_slice();
    let g = grad.as_slice();
    for b in 0..batch {
        for p in 0..pixels {
            let row = &g[(b * pixels + p) * k_len..(b * pixels + p + 1) * k_len];
            for (k, &v) in row.iter().enumerate() {
                if let Some(src) = geom.source(k, p / ow, p % ow) {
                    data[b * cols + src] += v;
                }
            }
        }
    }
    out
}

/// `(B·P) × J` patch-major rows to `B × (J·P)` channel-major images.
pub(crate) fn patches_to_channels(input: &DenseMatrix, batch: usize, pixels: usize) -> DenseMatrix {
    let channels = input.cols();
    let mut out = DenseMatrix::zeros(batch, channels * pixels);
    let src = input.as_slice();
    let dst = out.as_mut_slice();
    for b in 0..batch {
        for p in 0..pixels {
            for j in 0..channels {
                dst[b * channels * pixels + j * pixels + p] = src[(b * pixels + p) * channels + j];
            }
        }
    }
    out
}

pub(crate) fn channels_to_patches(grad: &DenseMatrix, channels: usize, pixels: usize) -> DenseMatrix {
    let batch = grad.rows();
    let mut out = DenseMatrix::zeros(batch * pixels, channels);
    let src = grad.as_slice();
    let dst = out.as_mut_slice();
    for b in 0..batch {
        for p in 0..pixels {
            for j in 0..channels {
                dst[(b * pixels + p) * channels + j] = src[b * channels * pixels + j * pixels + p];
            }
        }
    }
    out
}

/// Non-overlapping `size × size` max pooling on `B × (C·H·W)`; returns the pooled
/// values and, per output, the flat input index that won (first maximum on ties).
pub(crate) fn max_pool(
    input: &DenseMatrix,
    (channels, height, width): (usize, usize, usize),
    size: usize,
) -> (DenseMatrix, Vec<usize>) {
    let (ph, pw) = (height / size, width / size);
    let batch = input.rows();
    let out_cols = channels * ph * pw;
    let mut out = DenseMatrix::zeros(batch, out_cols);
    let mut argmax = vec![0usize; batch * out_cols];
    for b in 0..batch {
        let image = input.row(b);
        for c in 0..channels {
            for oy in 0..ph {
                for ox in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (c * height + oy * size + dy) * width + ox * size + dx;
                            if image[idx] > best {
                                best = image[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (c * ph + oy) * pw + ox;
                    out.set(b, o, best);
                    argmax[b * out_cols + o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}
