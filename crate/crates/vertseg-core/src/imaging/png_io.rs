//! Grayscale PNG reading and writing.
//!
//! Only 8- and 16-bit single-channel PNGs are accepted; anything else is a
//! codec error rather than a silent conversion. Encoding is deterministic:
//! identical pixel data produces byte-identical files.

use std::path::Path;

use image::{ImageBuffer, Luma};

use super::{BitDepth, GrayImage};
use crate::error::{Error, Result};

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let dynamic = image::open(path).map_err(|e| Error::codec(path, e.to_string()))?;
    match dynamic {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            let pixels = img.into_raw().into_iter().map(u16::from).collect();
            GrayImage::new(w as usize, h as usize, BitDepth::Eight, pixels)
        }
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            GrayImage::new(w as usize, h as usize, BitDepth::Sixteen, img.into_raw())
        }
        other => Err(Error::codec(
            path,
            format!(
                "expected 8- or 16-bit grayscale PNG, found {:?}",
                other.color()
            ),
        )),
    }
}

pub fn save_gray(path: &Path, image: &GrayImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let w = image.width() as u32;
    let h = image.height() as u32;
    match image.bit_depth() {
        BitDepth::Eight => {
            let raw: Vec<u8> = image.pixels().iter().map(|&p| p as u8).collect();
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, raw).expect("buffer sized from image");
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::codec(path, e.to_string()))
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w, h, image.pixels().to_vec())
                    .expect("buffer sized from image");
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::codec(path, e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img8 = GrayImage::new(5, 3, BitDepth::Eight, (0..15).map(|i| i * 17).collect())
            .unwrap();
        let p8 = dir.path().join("a.png");
        save_gray(&p8, &img8).unwrap();
        assert_eq!(load_gray(&p8).unwrap(), img8);

        let img16 =
            GrayImage::new(4, 4, BitDepth::Sixteen, (0..16).map(|i| i * 4001).collect()).unwrap();
        let p16 = dir.path().join("b.png");
        save_gray(&p16, &img16).unwrap();
        assert_eq!(load_gray(&p16).unwrap(), img16);
    }

    #[test]
    fn identical_pixels_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(8, 8, BitDepth::Eight, (0..64).map(|i| i * 3).collect())
            .unwrap();
        let p1 = dir.path().join("one.png");
        let p2 = dir.path().join("two.png");
        save_gray(&p1, &img).unwrap();
        save_gray(&p2, &img).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn missing_file_is_a_codec_error() {
        let err = load_gray(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(matches!(err, Error::Codec { .. }));
    }
}
