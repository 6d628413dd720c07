//! PNG ingest and emission.
//!
//! Images are stored as 16-bit grayscale with intensities in [0, 1] mapped
//! linearly onto 0..=65535; 8-bit inputs are accepted and scaled the same
//! way. Masks are 8-bit with values {0, 255}.

use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn write_png(path: &Path, width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| image_err(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an 8- or 16-bit grayscale PNG into [0, 1] intensities.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    ImageGrid::new(w as usize, h as usize, data)
}

/// Writes a 16-bit grayscale PNG, clamping intensities to [0, 1].
pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data().len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_ne_bytes());
    }
    write_png(path, img.width(), img.height(), &bytes, ExtendedColorType::L16)
}

/// Reads a mask PNG; any value above half range counts as foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    let labels = img.into_raw().into_iter().map(|v| (v > 127) as u8).collect();
    BinaryMask::new(w as usize, h as usize, labels)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.labels().iter().map(|&l| l * 255).collect();
    write_png(path, mask.width(), mask.height(), &bytes, ExtendedColorType::L8)
}

/// Writes an 8-bit RGB PNG from packed `[r, g, b]` triples.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::DimensionMismatch(format!("rgb buffer length {} != {width}x{height}x3", rgb.len())));
    }
    write_png(path, width, height, rgb, ExtendedColorType::Rgb8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ImageGrid::from_fn(7, 3, |x, y| (x + 7 * y) as f64 / 20.0);
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn mask_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/m.png");
        let m = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 2 == 0);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn eight_bit_images_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g8.png");
        write_png(&p, 2, 1, &[0, 255], ExtendedColorType::L8).unwrap();
        assert_eq!(read_image(&p).unwrap().data(), &[0.0, 1.0]);
    }
}
