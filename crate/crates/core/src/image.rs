//! Planar RGB images with values in `[0, 1]`.

use std::io::Cursor;

use image::{imageops::FilterType, ImageFormat, RgbImage};
use thiserror::Error;

use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data has {got} values, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("png decode failed: {0}")]
    Decode(String),
    #[error("png encode failed: {0}")]
    Encode(String),
}

/// `[3, H, W]` channel-planar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        let expected = CHANNELS * height * width;
        if data.len() != expected {
            return Err(ImageError::BadLength { expected, got: data.len() });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; CHANNELS * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    /// Writes `value` into all channels of flat pixel `index` (`row * W + col`).
    pub fn set_pixel(&mut self, index: usize, value: [f32; CHANNELS]) {
        let plane = self.pixel_count();
        for (c, v) in value.into_iter().enumerate() {
            self.data[c * plane + index] = v;
        }
    }

    pub fn pixel(&self, index: usize) -> [f32; CHANNELS] {
        let plane = self.pixel_count();
        [self.data[index], self.data[plane + index], self.data[2 * plane + index]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![CHANNELS, self.height, self.width], self.data.clone()).expect("image length invariant")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(ImageError::BadLength { expected: CHANNELS, got: s.first().copied().unwrap_or(0) });
        }
        Self::new(s[1], s[2], t.data().to_vec())
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let idx = y as usize * self.width + x as usize;
            let p = self.pixel(idx);
            image::Rgb(p.map(to_u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            let idx = y as usize * w + x as usize;
            out.set_pixel(idx, p.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        encode_png(&self.to_rgb8())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Bilinear resize, applied on the 8-bit representation.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let resized = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        Self::from_rgb8(&resized)
    }

    /// Separable Gaussian blur with kernel radius `3σ` and clamped edges.
    pub fn gaussian_blur(&self, sigma: f32) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> =
            (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * (sigma as f64).powi(2))).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = self.clone();
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for r in 0..h {
                for col in 0..w {
                    let acc: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(i, k)| {
                            let x = (col + i as isize - radius).clamp(0, w - 1);
                            k * self.get(c, r as usize, x as usize) as f64
                        })
                        .sum();
                    tmp.set(c, r as usize, col as usize, acc as f32);
                }
            }
            for r in 0..h {
                for col in 0..w {
                    let acc: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(i, k)| {
                            let y = (r + i as isize - radius).clamp(0, h - 1);
                            k * tmp.get(c, y as usize, col as usize) as f64
                        })
                        .sum();
                    out.set(c, r as usize, col as usize, acc as f32);
                }
            }
        }
        out
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| ImageError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Renders a `[0,1]` grid as a black-to-white-hot heatmap PNG.
pub fn heatmap_png(grid: &[f32], height: usize, width: usize) -> Result<Vec<u8>, ImageError> {
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = grid[y as usize * width + x as usize].clamp(0.0, 1.0);
        let r = (v * 3.0).min(1.0);
        let g = (v * 3.0 - 1.0).clamp(0.0, 1.0);
        let b = (v * 3.0 - 2.0).clamp(0.0, 1.0);
        image::Rgb([to_u8(r), to_u8(g), to_u8(b)])
    });
    encode_png(&img)
}
