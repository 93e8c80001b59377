use serde::{Deserialize, Serialize};
use xaimi_nn::{Real, Tensor};

use crate::error::{Error, Result};

/// Pixel grid with values in `[0,1]`, stored plane-major (`C × H × W`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!("degenerate image {height}×{width}×{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}×{width}×{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    /// Builds an image by clamping every value into `[0,1]` (non-finite → 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, raw: &[f32]) -> Result<Self> {
        let pixels = raw.iter().map(|&v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }).collect();
        Self::new(height, width, channels, pixels)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, pixels: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// Packs images into a channel-major `[C, N, H, W]` batch.
pub fn to_batch<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w, c) = first.shape();
    let n = images.len();
    let plane = h * w;
    let mut data = vec![T::zero(); c * n * plane];
    for (j, im) in images.iter().enumerate() {
        if im.shape() != (h, w, c) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (h, w, c), im.shape())));
        }
        for ch in 0..c {
            let dst = &mut data[(ch * n + j) * plane..(ch * n + j + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(&im.pixels[ch * plane..(ch + 1) * plane]) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, n, h, w], data)?)
}

/// Bilinear resize of one plane with half-pixel centres; identity when the
/// size is unchanged.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = src[y0 * w + x0] as f64;
            let b = src[y0 * w + x1] as f64;
            let c = src[y1 * w + x0] as f64;
            let d = src[y1 * w + x1] as f64;
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out.push((top + (bot - top) * ty) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn resize_preserves_constants_and_bounds() {
        let src = vec![0.25f32; 28 * 28];
        let out = resize_bilinear(&src, 28, 28, 32, 32);
        assert_eq!(out.len(), 1024);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let src: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 4, 4), src);
    }
}
