//! 8-bit grayscale images and their conversion to and from amplitudes.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageReader};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Amplitude;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimensions(format!("{} bytes for a {height}x{width} image", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Reads any supported format and converts to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?
            .with_guessed_format()
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?
            .decode()
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    /// Writes a PNG (or whatever format the extension names).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_image().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("buffer size")
    }

    /// Largest centered crop with the target aspect ratio, resampled to
    /// `height x width`.
    pub fn fit(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!("target size {height}x{width}")));
        }
        if self.dims() == (height, width) {
            return Ok(self.clone());
        }
        let (sh, sw) = (self.height as f64, self.width as f64);
        let target = width as f64 / height as f64;
        let (ch, cw) = if sw / sh > target {
            (self.height, ((sh * target).round() as usize).clamp(1, self.width))
        } else {
            (((sw / target).round() as usize).clamp(1, self.height), self.width)
        };
        let (r0, c0) = ((self.height - ch) / 2, (self.width - cw) / 2);
        let cropped = image::imageops::crop_imm(&self.to_image(), c0 as u32, r0 as u32, cw as u32, ch as u32).to_image();
        let resized = image::imageops::resize(&cropped, width as u32, height as u32, FilterType::Triangle);
        Self::new(height, width, resized.into_raw())
    }

    /// Pixel values divided by 255.
    pub fn to_amplitude<T: Real>(&self) -> Amplitude<T> {
        let s = T::lit(1.0 / 255.0);
        Amplitude::new(self.height, self.width, self.data.iter().map(|&v| T::lit(f64::from(v)) * s).collect())
            .expect("dimensions already validated")
    }

    /// Quantizes `clip(a * scale, 0, 1)`.
    pub fn from_scaled<T: Real>(a: &Amplitude<T>, scale: f64) -> Self {
        let data = a.data().iter().map(|v| ((v.as_f64() * scale).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { height: a.height(), width: a.width(), data }
    }

    /// Quantizes `a / max(a)`.
    pub fn from_max_normalized<T: Real>(a: &Amplitude<T>) -> Self {
        let max = a.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        Self::from_scaled(a, if max > 0.0 { 1.0 / max } else { 0.0 })
    }

    /// Quantizes `a` after the least-squares scale `s = <a, t> / <a, a>`
    /// against the reference `t`, which removes the arbitrary global gain of a
    /// reconstruction.
    pub fn from_fitted<T: Real>(a: &Amplitude<T>, reference: &Amplitude<T>) -> Result<Self> {
        if (a.height(), a.width()) != (reference.height(), reference.width()) {
            return Err(Error::ShapeMismatch(format!(
                "reconstruction {}x{} against reference {}x{}",
                a.height(),
                a.width(),
                reference.height(),
                reference.width()
            )));
        }
        let (mut at, mut aa) = (0.0, 0.0);
        for (x, t) in a.data().iter().zip(reference.data()) {
            at += x.as_f64() * t.as_f64();
            aa += x.as_f64() * x.as_f64();
        }
        Ok(Self::from_scaled(a, if aa > 0.0 { at / aa } else { 0.0 }))
    }
}
