//! Contour overlays on grayscale images.
//!
//! Ground truth is drawn in green (0, 255, 0) and predictions in red
//! (255, 0, 0). A contour pixel is a foreground pixel with at least one of
//! its eight neighbors in the background; pixels beyond the image border
//! count as background.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 0];

pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        on(x, y) && (-1..=1).any(|dy| (-1..=1).any(|dx| !on(x + dx, y + dy)))
    })
}

/// Packed RGB rendering of `img` in [0, 1] with the contour of `mask` in `color`.
pub fn render(img: &ImageGrid, mask: &BinaryMask, color: [u8; 3]) -> Result<Vec<u8>> {
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::DimensionMismatch(format!(
            "overlay image {}x{} vs mask {}x{}",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    let edge = contour(mask);
    let mut rgb = Vec::with_capacity(img.data().len() * 3);
    for (&v, &e) in img.data().iter().zip(edge.labels()) {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&if e == 1 { color } else { [g, g, g] });
    }
    Ok(rgb)
}

/// Ground truth on the left, prediction on the right; returns `(width, rgb)`.
pub fn side_by_side(img: &ImageGrid, gt: &BinaryMask, pred: &BinaryMask) -> Result<(usize, Vec<u8>)> {
    let left = render(img, gt, GT_COLOR)?;
    let right = render(img, pred, PRED_COLOR)?;
    let row = img.width() * 3;
    let mut out = Vec::with_capacity(left.len() * 2);
    for y in 0..img.height() {
        out.extend_from_slice(&left[y * row..(y + 1) * row]);
        out.extend_from_slice(&right[y * row..(y + 1) * row]);
    }
    Ok((img.width() * 2, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Boundary set written out directly from the definition.
    fn boundary_oracle(m: &BinaryMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (x, y) in m.foreground() {
            let mut edge = false;
            for ny in y as i64 - 1..=y as i64 + 1 {
                for nx in x as i64 - 1..=x as i64 + 1 {
                    let inside = nx >= 0 && ny >= 0 && (nx as usize) < m.width() && (ny as usize) < m.height();
                    if !inside || !m.get(nx as usize, ny as usize) {
                        edge = true;
                    }
                }
            }
            if edge {
                out.push((x, y));
            }
        }
        out
    }

    #[test]
    fn known_4x4_contour() {
        let m = BinaryMask::new(4, 4, vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1]).unwrap();
        let c = contour(&m);
        assert_eq!(c.foreground(), boundary_oracle(&m));
        assert_eq!(c.labels(), &[0, 0, 0, 0, 0, 1, 1, 1, 0, 1, 0, 1, 0, 1, 1, 1]);
    }

    #[test]
    fn empty_mask_keeps_grayscale() {
        let img = ImageGrid::from_fn(3, 2, |x, y| (x + y) as f64 / 4.0);
        let rgb = render(&img, &BinaryMask::zeros(3, 2), GT_COLOR).unwrap();
        let gray: Vec<u8> = img.data().iter().flat_map(|v| [(v * 255.0).round() as u8; 3]).collect();
        assert_eq!(rgb, gray);
    }

    #[test]
    fn full_mask_draws_border() {
        let c = contour(&BinaryMask::ones(5, 4));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(c.get(x, y), x == 0 || y == 0 || x == 4 || y == 3);
            }
        }
    }

    #[test]
    fn side_by_side_layout() {
        let img = ImageGrid::filled(2, 2, 0.0);
        let (w, rgb) = side_by_side(&img, &BinaryMask::ones(2, 2), &BinaryMask::zeros(2, 2)).unwrap();
        assert_eq!(w, 4);
        assert_eq!(&rgb[0..3], &GT_COLOR);
        assert_eq!(&rgb[6..9], &[0, 0, 0]);
        assert!(render(&img, &BinaryMask::zeros(3, 2), GT_COLOR).is_err());
    }

    proptest! {
        #[test]
        fn contour_matches_oracle(w in 1usize..8, h in 1usize..8, bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_fn(w, h, |x, y| bits[y * 8 + x]);
            prop_assert_eq!(contour(&m).foreground(), boundary_oracle(&m));
        }
    }
}
