//! Image preprocessing: CLAHE, bilinear resampling, intensity
//! normalization, and the black-vertebra/white-background mask codec.

mod clahe;
mod codec;
mod png_io;
mod resize;

pub use clahe::{clahe, ClaheParams};
pub use codec::{decode_mask, denormalize, encode_mask, normalize};
pub use png_io::{load_gray, save_gray};
pub use resize::{resize_bilinear, resize_mask};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported grayscale sample depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    /// Largest representable intensity (`2^depth - 1`).
    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// 2-D grayscale raster with row-major integer intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    bit_depth: BitDepth,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, bit_depth: BitDepth, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        let max = bit_depth.max_value();
        if bit_depth == BitDepth::Eight && pixels.iter().any(|&p| p > max) {
            return Err(Error::Parameter(format!(
                "pixel intensity exceeds 8-bit range (max {max})"
            )));
        }
        Ok(GrayImage {
            width,
            height,
            bit_depth,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, bit_depth: BitDepth, value: u16) -> Result<Self> {
        GrayImage::new(width, height, bit_depth, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> BitDepth {
        self.bit_depth
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u16] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    /// Sample with edge clamping; coordinates may lie outside the raster.
    #[inline]
    pub(crate) fn get_clamped(&self, x: usize, y: usize) -> u16 {
        self.pixels[y.min(self.height - 1) * self.width + x.min(self.width - 1)]
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..][..self.width];
            pixels.extend(row.iter().rev());
        }
        GrayImage {
            width: self.width,
            height: self.height,
            bit_depth: self.bit_depth,
            pixels,
        }
    }
}

/// Binary raster where 1 marks vertebra foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} mask needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Parameter(
                "mask pixels must be strictly 0 or 1".into(),
            ));
        }
        Ok(BinaryMask {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        BinaryMask::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.pixels.len() as f64
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..][..self.width];
            pixels.extend(row.iter().rev());
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_validates_size_and_range() {
        assert!(GrayImage::new(2, 2, BitDepth::Eight, vec![0, 1, 2, 3]).is_ok());
        assert!(GrayImage::new(2, 2, BitDepth::Eight, vec![0, 1, 2]).is_err());
        assert!(GrayImage::new(2, 2, BitDepth::Eight, vec![0, 1, 2, 300]).is_err());
        assert!(GrayImage::new(2, 2, BitDepth::Sixteen, vec![0, 1, 2, 60000]).is_ok());
        assert!(GrayImage::new(0, 2, BitDepth::Eight, vec![]).is_err());
    }

    #[test]
    fn mask_must_be_strictly_binary() {
        assert!(BinaryMask::new(2, 1, vec![0, 1]).is_ok());
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
    }

    #[test]
    fn flip_is_involutive() {
        let img = GrayImage::new(3, 2, BitDepth::Eight, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.pixels(), &[3, 2, 1, 6, 5, 4]);
        assert_eq!(flipped.flip_horizontal(), img);
    }
}
