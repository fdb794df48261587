//! Float RGB images, binary masks, and PNG helpers.

use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel rectangle inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn square(top: usize, left: usize, size: usize) -> Self {
        Self::new(top, left, size, size)
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.bottom() <= height && self.right() <= width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }
}

/// RGB image with channel values in `[0, 1]`, stored row-major as HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(
                "image buffer",
                format!("{height}x{width}x3 = {expected} values"),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * Self::CHANNELS + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        if !rect.fits_in(self.height, self.width) {
            return Err(Error::Geometry(format!(
                "crop {rect:?} exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(rect.height * rect.width * Self::CHANNELS);
        for y in rect.top..rect.bottom() {
            let start = (y * self.width + rect.left) * Self::CHANNELS;
            data.extend_from_slice(&self.data[start..start + rect.width * Self::CHANNELS]);
        }
        Ok(Image {
            height: rect.height,
            width: rect.width,
            data,
        })
    }

    /// Adds `shift` to every channel and clamps to the unit interval.
    pub fn shift_gray(&mut self, shift: f32) {
        for v in &mut self.data {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Loads an image and resizes it to `size`×`size` with a bilinear filter.
    pub fn load_resized(path: &Path, size: usize) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() as usize == size && rgb.height() as usize == size {
            return Ok(Self::from_rgb8(&rgb));
        }
        let resized = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
        Ok(Self::from_rgb8(&resized))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Image {
        let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Image {
            height: rgb.height() as usize,
            width: rgb.width() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| quantize_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary ground-truth mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("mask buffer", height * width, bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Loads a mask, resizing with nearest-neighbour sampling; luma above mid-gray is foreground.
    pub fn load_resized(path: &Path, size: usize) -> Result<Mask> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let mut luma = img.to_luma8();
        if luma.width() as usize != size || luma.height() as usize != size {
            luma = image::imageops::resize(&luma, size as u32, size as u32, FilterType::Nearest);
        }
        let bits = luma.as_raw().iter().map(|&v| v > 127).collect();
        Mask::from_bits(size, size, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
