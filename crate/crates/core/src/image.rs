//! Minimal RGB raster used by the patch pipeline (H×W×3, `f64` in [0, 255]).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        RgbImage { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        let img = RgbImage { height, width, data };
        img.check_range()?;
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.num_pixels() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Builds an image of the same size from per-pixel values.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> RgbImage {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn check_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=255.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::Parameter(format!(
                "pixel value {} at offset {i} outside [0, 255]",
                self.data[i]
            ))),
        }
    }

    /// Binary PPM (P6), values rounded and clamped to u8.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let img = RgbImage::filled(2, 3, [0.0, 127.6, 255.0]);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
        assert_eq!(&ppm[11..14], &[0, 128, 255]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(RgbImage::from_vec(1, 1, vec![0.0, 256.0, 0.0]).is_err());
        assert!(RgbImage::from_vec(1, 1, vec![0.0, 0.0]).is_err());
    }
}
