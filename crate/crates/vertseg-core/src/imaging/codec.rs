//! Mask raster convention and network input conditioning.
//!
//! Stored masks are 8-bit grayscale with black (< 128) marking vertebra
//! foreground and white marking background; the threshold tolerates
//! anti-aliased edges in hand-drawn masks.

use super::{BinaryMask, BitDepth, GrayImage};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Grayscale mask image -> binary mask: pixels below 128 are foreground.
pub fn decode_mask(image: &GrayImage) -> Result<BinaryMask> {
    if image.bit_depth() != BitDepth::Eight {
        return Err(Error::Parameter(
            "mask images must be 8-bit grayscale".into(),
        ));
    }
    let pixels = image.pixels().iter().map(|&p| u8::from(p < 128)).collect();
    BinaryMask::new(image.width(), image.height(), pixels)
}

/// Binary mask -> grayscale image: foreground black (0), background white
/// (255). `encode_mask` then `decode_mask` is the identity.
pub fn encode_mask(mask: &BinaryMask) -> GrayImage {
    let pixels = mask
        .pixels()
        .iter()
        .map(|&p| if p == 1 { 0u16 } else { 255 })
        .collect();
    GrayImage::new(mask.width(), mask.height(), BitDepth::Eight, pixels)
        .expect("mask dimensions are valid image dimensions")
}

/// Maps intensities linearly onto [0, 1] as a `[1, 1, H, W]` network input.
pub fn normalize<T: Scalar>(image: &GrayImage) -> Tensor<T> {
    let scale = T::one() / T::from_f64(image.bit_depth().max_value() as f64);
    let data: Vec<T> = image
        .pixels()
        .iter()
        .map(|&p| T::from_f64(p as f64) * scale)
        .collect();
    Tensor::new(vec![1, 1, image.height(), image.width()], data)
        .expect("image dimensions are valid tensor dimensions")
}

/// Inverse of [`normalize`]: scales back to the intensity range and rounds.
/// Exact round trip for 8-bit inputs.
pub fn denormalize<T: Scalar>(tensor: &Tensor<T>, bit_depth: BitDepth) -> Result<GrayImage> {
    let [n, c, h, w] = tensor.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Dimension(format!(
            "denormalize expects a [1, 1, H, W] tensor, got {:?}",
            tensor.shape()
        )));
    }
    let max = bit_depth.max_value() as f64;
    let pixels = tensor
        .data()
        .iter()
        .map(|&v| (v.as_f64() * max).round().clamp(0.0, max) as u16)
        .collect();
    GrayImage::new(w, h, bit_depth, pixels)
}
