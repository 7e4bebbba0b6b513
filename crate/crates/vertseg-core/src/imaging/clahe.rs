//! Contrast-limited adaptive histogram equalization.
//!
//! The image is covered by a tile grid (padded by edge replication when the
//! grid does not divide it evenly). Each tile gets a clipped, redistributed
//! histogram whose CDF defines a monotone intensity mapping; every pixel is
//! then bilinearly blended between the mappings of its four surrounding
//! tiles.
//!
//! The mapping convention is `round((cdf(v) - cdf_min) / (area - cdf_min) *
//! max_intensity)` with `cdf_min` the CDF at the first occupied bin, so the
//! darkest occupied intensity maps to 0 and the brightest to full scale. A
//! single-valued tile maps its value to itself instead of stretching a flat
//! region to full white.

use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};

/// Tile grid and clipping configuration.
///
/// `clip_limit` is a multiple of the uniform histogram bin height
/// (`area / bins`); `f64::INFINITY` disables clipping entirely, which with a
/// single tile reduces the algorithm to plain global histogram equalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::Parameter(format!(
                "tile grid must be at least 1x1, got {}x{}",
                self.tiles_x, self.tiles_y
            )));
        }
        if self.bins < 2 || self.bins > 65536 {
            return Err(Error::Parameter(format!(
                "bins must be in [2, 65536], got {}",
                self.bins
            )));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Parameter(format!(
                "clip limit must be at least 1.0, got {}",
                self.clip_limit
            )));
        }
        Ok(())
    }
}

#[inline]
fn bin_of(value: u16, bins: usize, levels: u32) -> usize {
    (value as u64 * bins as u64 / levels as u64) as usize
}

/// Histogram -> monotone LUT for one tile. Exposed within the crate so the
/// monotonicity invariant can be tested directly.
pub(crate) fn tile_lut(
    hist: &mut [u64],
    area: u64,
    clip_limit: f64,
    max_value: u16,
    single_value: Option<u16>,
) -> Vec<u16> {
    let bins = hist.len();
    if let Some(v) = single_value {
        // No contrast to amplify: the tile's only value maps to itself.
        return vec![v; bins];
    }

    if clip_limit.is_finite() {
        let clip = ((clip_limit * area as f64 / bins as f64).floor() as u64).max(1);
        let mut excess = 0u64;
        for h in hist.iter_mut() {
            if *h > clip {
                excess += *h - clip;
                *h = clip;
            }
        }
        // Exact redistribution: total count is preserved so the CDF still
        // ends at `area`.
        let batch = excess / bins as u64;
        let residual = (excess % bins as u64) as usize;
        for h in hist.iter_mut() {
            *h += batch;
        }
        for j in 0..residual {
            hist[j * bins / residual.max(1)] += 1;
        }
    }

    let mut lut = vec![0u16; bins];
    let mut cdf = 0u64;
    let mut cdf_min = 0u64;
    let mut seen_first = false;
    let mut cdfs = vec![0u64; bins];
    for (i, &h) in hist.iter().enumerate() {
        cdf += h;
        cdfs[i] = cdf;
        if !seen_first && h > 0 {
            cdf_min = cdf;
            seen_first = true;
        }
    }
    let denom = area - cdf_min;
    if denom == 0 {
        // Multiple values collapsed into one occupied bin (only possible
        // when bins < intensity levels): map every bin to its center.
        let levels = max_value as u64 + 1;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (((2 * i as u64 + 1) * levels / (2 * bins as u64)) as u16).min(max_value);
        }
        return lut;
    }
    for (i, l) in lut.iter_mut().enumerate() {
        let num = (cdfs[i].saturating_sub(cdf_min)) * max_value as u64;
        // Round half up.
        *l = ((2 * num + denom) / (2 * denom)) as u16;
    }
    lut
}

/// Applies CLAHE; the output has the same dimensions and bit depth as the
/// input.
pub fn clahe(image: &GrayImage, params: &ClaheParams) -> Result<GrayImage> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let tile_w = w.div_ceil(params.tiles_x);
    let tile_h = h.div_ceil(params.tiles_y);
    if tile_w < 2 || tile_h < 2 {
        return Err(Error::Parameter(format!(
            "degenerate tile size {tile_w}x{tile_h}; fewer tiles are needed for a {w}x{h} image"
        )));
    }
    let max_value = image.bit_depth().max_value();
    let levels = max_value as u32 + 1;
    let bins = params.bins;
    let area = (tile_w * tile_h) as u64;

    // Per-tile LUTs over the edge-replicated padded grid.
    let mut luts: Vec<Vec<u16>> = Vec::with_capacity(params.tiles_x * params.tiles_y);
    let mut hist = vec![0u64; bins];
    for ty in 0..params.tiles_y {
        for tx in 0..params.tiles_x {
            hist.fill(0);
            let mut min_v = u16::MAX;
            let mut max_v = 0u16;
            for y in ty * tile_h..(ty + 1) * tile_h {
                for x in tx * tile_w..(tx + 1) * tile_w {
                    let v = image.get_clamped(x, y);
                    min_v = min_v.min(v);
                    max_v = max_v.max(v);
                    hist[bin_of(v, bins, levels)] += 1;
                }
            }
            let single = (min_v == max_v).then_some(min_v);
            luts.push(tile_lut(&mut hist, area, params.clip_limit, max_value, single));
        }
    }

    // Bilinear blend between the four surrounding tile mappings, with tile
    // centers as the interpolation lattice.
    let tiles_x = params.tiles_x as isize;
    let tiles_y = params.tiles_y as isize;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
        let ty0 = gy.floor();
        let fy = gy - ty0;
        let iy0 = (ty0 as isize).clamp(0, tiles_y - 1) as usize;
        let iy1 = (ty0 as isize + 1).clamp(0, tiles_y - 1) as usize;
        for x in 0..w {
            let gx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
            let tx0 = gx.floor();
            let fx = gx - tx0;
            let ix0 = (tx0 as isize).clamp(0, tiles_x - 1) as usize;
            let ix1 = (tx0 as isize + 1).clamp(0, tiles_x - 1) as usize;

            let b = bin_of(image.get(x, y), bins, levels);
            let tl = luts[iy0 * params.tiles_x + ix0][b] as f64;
            let tr = luts[iy0 * params.tiles_x + ix1][b] as f64;
            let bl = luts[iy1 * params.tiles_x + ix0][b] as f64;
            let br = luts[iy1 * params.tiles_x + ix1][b] as f64;
            let top = (1.0 - fx) * tl + fx * tr;
            let bottom = (1.0 - fx) * bl + fx * br;
            let v = (1.0 - fy) * top + fy * bottom;
            pixels.push((v.round().max(0.0) as u64).min(max_value as u64) as u16);
        }
    }
    GrayImage::new(w, h, image.bit_depth(), pixels)
}
