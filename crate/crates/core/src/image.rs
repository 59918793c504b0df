//! Dense image and mask buffers.
//!
//! Pixels are stored row-major as `[y][x][channel]` with values in `[0, 1]`.
//! Masks are single-channel `[y][x]`.

use crate::error::{Error, Result};
use crate::num::Scalar;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Pixel as a fixed 3-channel array; only valid for RGB images.
    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [T; 3] {
        let i = (y * self.width + x) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }
}

impl Image<f32> {
    pub fn to_f64(&self) -> Image<f64> {
        self.map(|v| v as f64)
    }
}

impl Image<f64> {
    pub fn to_f32(&self) -> Image<f32> {
        self.map(|v| v as f32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask<T = f32> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mask<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![T::zero(); height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Mask<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        sum / self.data.len() as f64
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Mask<U> {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl Mask<f32> {
    pub fn to_f64(&self) -> Mask<f64> {
        self.map(|v| v as f64)
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let x = v.as_f64().clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Writes a binary PPM (P6); for visual inspection of pipeline stages.
pub fn write_ppm<T: Scalar>(image: &Image<T>, path: &Path) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::ShapeMismatch(format!("ppm needs 3 channels, got {}", image.channels)));
    }
    let mut out = Vec::with_capacity(image.data.len() + 32);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.extend(image.data.iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a binary PGM (P5) of a mask.
pub fn write_pgm<T: Scalar>(mask: &Mask<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(mask.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    out.extend(mask.data.iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_round_trip() {
        let mut img: Image<f32> = Image::zeros(4, 5, 3);
        img.set(2, 3, 1, 0.5);
        assert_eq!(img.get(2, 3, 1), 0.5);
        assert_eq!(img.data[(2 * 5 + 3) * 3 + 1], 0.5);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Image::<f32>::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Mask::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ppm_pgm_headers() {
        let dir = tempfile::tempdir().unwrap();
        let img: Image<f32> = Image::zeros(2, 3, 3);
        let p = dir.path().join("x.ppm");
        write_ppm(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);

        let mask: Mask<f32> = Mask::zeros(2, 3);
        let p = dir.path().join("x.pgm");
        write_pgm(&mask, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }
}
