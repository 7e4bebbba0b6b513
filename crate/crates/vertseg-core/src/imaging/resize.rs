//! Bilinear resampling under the pixel-center alignment convention:
//! output pixel `i` samples source coordinate `(i + 0.5) * in/out - 0.5`,
//! clamped to the raster.
//!
//! All weights are exact rationals with denominator `2 * out_dim`, so the
//! whole interpolation runs in integer arithmetic. That makes results
//! bit-reproducible and exactly mirror-symmetric: resizing a flipped image
//! equals flipping the resized image, with no floating-point asymmetry.

use super::{BinaryMask, GrayImage};
use crate::error::{Error, Result};

/// Per-output-pixel sample: two source indices and the fractional weight of
/// the second one, as a numerator over `2 * out_dim`.
struct AxisSample {
    lo: usize,
    hi: usize,
    frac: u64,
}

fn axis_samples(in_dim: usize, out_dim: usize) -> Vec<AxisSample> {
    let den = 2 * out_dim as i64;
    (0..out_dim)
        .map(|i| {
            // num / den == (i + 0.5) * in/out - 0.5
            let num = (2 * i as i64 + 1) * in_dim as i64 - out_dim as i64;
            if num < 0 {
                return AxisSample {
                    lo: 0,
                    hi: 0,
                    frac: 0,
                };
            }
            let lo = (num / den) as usize;
            if lo >= in_dim - 1 {
                return AxisSample {
                    lo: in_dim - 1,
                    hi: in_dim - 1,
                    frac: 0,
                };
            }
            AxisSample {
                lo,
                hi: lo + 1,
                frac: (num - lo as i64 * den) as u64,
            }
        })
        .collect()
}

const MAX_OUTPUT_DIM: usize = 1 << 16;

fn check_output_dims(out_w: usize, out_h: usize) -> Result<()> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Parameter(format!(
            "output dimensions must be at least 1, got {out_w}x{out_h}"
        )));
    }
    if out_w > MAX_OUTPUT_DIM || out_h > MAX_OUTPUT_DIM {
        return Err(Error::Parameter(format!(
            "output dimensions must be at most {MAX_OUTPUT_DIM}, got {out_w}x{out_h}"
        )));
    }
    Ok(())
}

/// Weighted sum of the four neighbours, as an exact integer over
/// `(2*out_w) * (2*out_h)`.
#[inline]
fn sample_num(
    get: impl Fn(usize, usize) -> u64,
    xs: &AxisSample,
    ys: &AxisSample,
    den_x: u64,
    den_y: u64,
) -> u64 {
    let wx1 = xs.frac;
    let wx0 = den_x - wx1;
    let wy1 = ys.frac;
    let wy0 = den_y - wy1;
    get(xs.lo, ys.lo) * wx0 * wy0
        + get(xs.hi, ys.lo) * wx1 * wy0
        + get(xs.lo, ys.hi) * wx0 * wy1
        + get(xs.hi, ys.hi) * wx1 * wy1
}

/// Resizes a grayscale image, rounding interpolated intensities to the
/// nearest integer (ties away from zero). An identity resize is
/// bit-identical to its input.
pub fn resize_bilinear(image: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    check_output_dims(out_w, out_h)?;
    let xs = axis_samples(image.width(), out_w);
    let ys = axis_samples(image.height(), out_h);
    let den_x = 2 * out_w as u64;
    let den_y = 2 * out_h as u64;
    let den = den_x * den_y;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y_s in &ys {
        for x_s in &xs {
            let num = sample_num(
                |x, y| image.get(x, y) as u64,
                x_s,
                y_s,
                den_x,
                den_y,
            );
            pixels.push(((2 * num + den) / (2 * den)) as u16);
        }
    }
    GrayImage::new(out_w, out_h, image.bit_depth(), pixels)
}

/// Resizes a binary mask: bilinear on {0,1} values, thresholded at 0.5 with
/// ties mapping to foreground. Output is strictly binary.
pub fn resize_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> Result<BinaryMask> {
    check_output_dims(out_w, out_h)?;
    let xs = axis_samples(mask.width(), out_w);
    let ys = axis_samples(mask.height(), out_h);
    let den_x = 2 * out_w as u64;
    let den_y = 2 * out_h as u64;
    let den = den_x * den_y;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y_s in &ys {
        for x_s in &xs {
            let num = sample_num(|x, y| mask.get(x, y) as u64, x_s, y_s, den_x, den_y);
            pixels.push(u8::from(2 * num >= den));
        }
    }
    BinaryMask::new(out_w, out_h, pixels)
}
