//! Seeded training-time augmentation.
//!
//! Three conservative transforms, applied in a fixed order: horizontal flip
//! (probability 0.5), intensity scaling in [0.9, 1.1] (image only), and an
//! integer translation of up to 4 pixels per axis with edge padding. The
//! flip and translation are applied identically to the image and its mask,
//! and the mask stays strictly binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};

const MAX_SHIFT: i64 = 4;

pub fn augment(image: &GrayImage, mask: &BinaryMask, seed: u64) -> Result<(GrayImage, BinaryMask)> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Dimension(format!(
            "image {}x{} and mask {}x{} must pair",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(0.5);
    let scale: f64 = rng.random_range(0.9..=1.1);
    let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);

    let (w, h) = (image.width(), image.height());
    let max_value = image.bit_depth().max_value();

    // Source coordinate for output (x, y) under flip-then-translate, with
    // edge replication outside the raster.
    let src = |x: usize, y: usize| -> (usize, usize) {
        let mut sx = x as i64 - dx;
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        sx = sx.clamp(0, w as i64 - 1);
        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
        (sx, sy)
    };

    let mut img_pixels = Vec::with_capacity(w * h);
    let mut mask_pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            let v = image.get(sx, sy) as f64 * scale;
            img_pixels.push(v.round().clamp(0.0, max_value as f64) as u16);
            // Re-binarize: values are 0/1 already, but keep the invariant
            // explicit.
            mask_pixels.push(u8::from(mask.get(sx, sy) >= 1));
        }
    }
    Ok((
        GrayImage::new(w, h, image.bit_depth(), img_pixels)?,
        BinaryMask::new(w, h, mask_pixels)?,
    ))
}
