use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `height × width × 3` byte raster, row-major, interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = vec![0u8; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean, rounded.
    pub fn mean_color(&self) -> [u8; 3] {
        let mut sums = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height).max(1) as u64;
        sums.map(|s| ((s + n / 2) / n) as u8)
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// `i + 0.5`), clamped at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx as usize, fy as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut out = [0.0; 3];
        let (p00, p10, p01, p11) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
            let bot = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Resamples onto a `width × height` canvas where canvas pixel `(u, v)`
    /// shows source position `((u + 0.5 + x0) / scale, (v + 0.5 + y0) / scale)`.
    /// Canvas pixels falling outside the scaled source take `fill`.
    pub fn resample(&self, scale: f64, x0: f64, y0: f64, width: usize, height: usize, fill: [u8; 3]) -> Image {
        let mut out = Image::filled(width, height, fill);
        let (sw, sh) = (self.width as f64 * scale, self.height as f64 * scale);
        for v in 0..height {
            let cy = v as f64 + 0.5 + y0;
            if cy < 0.0 || cy >= sh {
                continue;
            }
            for u in 0..width {
                let cx = u as f64 + 0.5 + x0;
                if cx < 0.0 || cx >= sw {
                    continue;
                }
                let px = self.sample_bilinear(cx / scale, cy / scale);
                out.set_pixel(u, v, px.map(|c| c.round().clamp(0.0, 255.0) as u8));
            }
        }
        out
    }

    /// Network input tensor `1 × 3 × H × W`, bytes mapped to
    /// `(v − 128) / 64`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![T::zero(); 3 * w * h];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = T::lit((px[c] as f64 - 128.0) / 64.0);
            }
        }
        Tensor::from_parts(vec![1, 3, h, w], data)
    }
}

/// Stacks same-sized images into an `N × 3 × H × W` batch.
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::contract("empty batch"));
    };
    let mut data = Vec::with_capacity(images.len() * 3 * first.width * first.height);
    for img in images {
        if (img.width, img.height) != (first.width, first.height) {
            return Err(Error::dim("batch images differ in size"));
        }
        data.extend(img.to_tensor::<T>().into_data());
    }
    Ok(Tensor::from_parts(vec![images.len(), 3, first.height, first.width], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resample_is_exact() {
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::new(4, 3, data).unwrap();
        assert_eq!(img.resample(1.0, 0.0, 0.0, 4, 3, [0, 0, 0]), img);
    }

    #[test]
    fn resample_pads_outside() {
        let img = Image::filled(2, 2, [10, 20, 30]);
        let out = img.resample(1.0, -1.0, -1.0, 4, 4, [1, 2, 3]);
        assert_eq!(out.pixel(0, 0), [1, 2, 3]);
        assert_eq!(out.pixel(1, 1), [10, 20, 30]);
        assert_eq!(out.pixel(3, 3), [1, 2, 3]);
    }

    #[test]
    fn mean_color_rounds() {
        let img = Image::new(2, 1, vec![0, 0, 0, 255, 3, 1]).unwrap();
        assert_eq!(img.mean_color(), [128, 2, 1]);
    }
}
