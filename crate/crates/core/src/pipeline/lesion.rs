//! Per-lesion processing shared by the commands: region of interest,
//! GrabCut labels, network inputs and mapping predictions back.

use std::collections::{BTreeMap, HashMap};

use crate::cluster::{extract_feature, standardize, LesionFeature, LesionPair};
use crate::error::{Error, Result};
use crate::grabcut::{grabcut, trimap_from_recist, GrabcutConfig, RecistAnnotation};
use crate::grid::{preprocess_image, preprocess_mask, resize_bilinear, square_offsets, BinaryMask, ImageGrid, NormalizeMode};
use crate::nn::{infer_pairs, CosegNet, Example};
use crate::rng::SeededRng;

/// Axis-aligned crop `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    /// RECIST endpoint box grown by `margin` pixels and clipped to the image.
    pub fn around(ann: &RecistAnnotation, width: usize, height: usize, margin: usize) -> Result<Roi> {
        let (xmin, ymin, xmax, ymax) = ann.bbox();
        if !(xmin >= 0.0 && ymin >= 0.0 && xmax <= (width - 1) as f64 && ymax <= (height - 1) as f64) {
            return Err(Error::AnnotationOutOfBounds(format!("{}: endpoints outside {width}x{height}", ann.image_id)));
        }
        let x0 = (xmin.floor() as usize).saturating_sub(margin);
        let y0 = (ymin.floor() as usize).saturating_sub(margin);
        let x1 = (xmax.ceil() as usize + margin).min(width - 1);
        let y1 = (ymax.ceil() as usize + margin).min(height - 1);
        Ok(Roi { x0, y0, width: x1 - x0 + 1, height: y1 - y0 + 1 })
    }

    pub fn crop_image(&self, img: &ImageGrid) -> ImageGrid {
        img.crop(self.x0, self.y0, self.width, self.height)
    }

    pub fn crop_mask(&self, mask: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| mask.get(self.x0 + x, self.y0 + y))
    }

    pub fn local(&self, ann: &RecistAnnotation) -> RecistAnnotation {
        ann.translate(-(self.x0 as f64), -(self.y0 as f64))
    }

    /// Full-size mask that is `local` inside the region and background elsewhere.
    pub fn paste_mask(&self, local: &BinaryMask, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x, y) && local.get(x - self.x0, y - self.y0))
    }

    pub fn paste_image(&self, local: &ImageGrid, width: usize, height: usize) -> ImageGrid {
        ImageGrid::from_fn(width, height, |x, y| if self.contains(x, y) { local.get(x - self.x0, y - self.y0) } else { 0.0 })
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }
}

/// GrabCut mask for one lesion, computed on its region of interest and
/// returned at full image size.
pub fn weak_mask(img: &ImageGrid, ann: &RecistAnnotation, cfg: &GrabcutConfig, margin: usize, rng: &mut SeededRng) -> Result<BinaryMask> {
    let roi = Roi::around(ann, img.width(), img.height(), margin)?;
    let trimap = trimap_from_recist(&roi.local(ann), roi.width, roi.height, cfg)?;
    let local = grabcut(&roi.crop_image(img), &trimap, cfg, rng)?;
    Ok(roi.paste_mask(&local, img.width(), img.height()))
}

/// Network input and target for one lesion.
pub fn network_example(img: &ImageGrid, mask: &BinaryMask, roi: &Roi, size: usize, mode: NormalizeMode) -> Example {
    Example { image: preprocess_image(&roi.crop_image(img), size, mode), mask: preprocess_mask(&roi.crop_mask(mask), size) }
}

/// Inverse of the square padding and resize: a `size x size` map back to
/// the region's own resolution.
pub fn unmap(prob: &ImageGrid, roi: &Roi) -> ImageGrid {
    let s = roi.width.max(roi.height);
    let (ox, oy) = square_offsets(roi.width, roi.height);
    resize_bilinear(prob, s, s).crop(ox, oy, roi.width, roi.height)
}

/// Appearance features of every lesion, z-scored when `standardized`.
pub fn lesion_features(items: &[(&ImageGrid, &RecistAnnotation)], standardized: bool) -> Result<Vec<LesionFeature>> {
    let raw = items.iter().map(|(img, ann)| extract_feature(img, ann)).collect::<Result<Vec<_>>>()?;
    Ok(if standardized { standardize(&raw) } else { raw })
}

/// Partner of each test lesion: the other member of the first listed pair
/// that contains it, or the lesion itself when it appears in no pair.
pub fn test_partners(test_ids: &[String], pairs: &[LesionPair]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for p in pairs {
        out.entry(p.a.clone()).or_insert_with(|| p.b.clone());
        out.entry(p.b.clone()).or_insert_with(|| p.a.clone());
    }
    test_ids.iter().map(|id| (id.clone(), out.get(id).cloned().unwrap_or_else(|| id.clone()))).collect()
}

/// Foreground probability at network resolution for every key of
/// `partners`. Each distinct pair is run once.
pub fn predict(net: &CosegNet, partners: &BTreeMap<String, String>, data: &HashMap<String, Example>, single: bool, batch: usize) -> Result<BTreeMap<String, ImageGrid>> {
    let mut pairs: Vec<LesionPair> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (a, b) in partners {
        let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        if seen.insert(key.clone()) {
            pairs.push(LesionPair { a: key.0, b: key.1, cluster: None });
        }
    }
    let probs = infer_pairs(net, &pairs, data, single, batch)?;
    let mut by_pair: HashMap<(String, String), (ImageGrid, ImageGrid)> = HashMap::new();
    for (p, pr) in pairs.into_iter().zip(probs) {
        by_pair.insert((p.a, p.b), pr);
    }
    let mut out = BTreeMap::new();
    for (a, b) in partners {
        let (pa, pb) = if a <= b { (a, b) } else { (b, a) };
        let (qa, qb) = &by_pair[&(pa.clone(), pb.clone())];
        out.insert(a.clone(), if a == pa { qa.clone() } else { qb.clone() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grabcut::{Point, Segment};

    fn ann(x0: f64, y0: f64, x1: f64, y1: f64) -> RecistAnnotation {
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        RecistAnnotation::new("l", Segment::new(Point::new(x0, cy), Point::new(x1, cy)), Segment::new(Point::new(cx, y0), Point::new(cx, y1))).unwrap()
    }

    #[test]
    fn roi_grows_and_clips() {
        let r = Roi::around(&ann(10.0, 12.0, 30.0, 20.0), 40, 40, 5).unwrap();
        assert_eq!(r, Roi { x0: 5, y0: 7, width: 31, height: 19 });
        let r = Roi::around(&ann(2.0, 3.0, 30.0, 20.0), 32, 40, 5).unwrap();
        assert_eq!(r, Roi { x0: 0, y0: 0, width: 32, height: 26 });
        assert!(Roi::around(&ann(2.0, 3.0, 40.0, 20.0), 32, 40, 5).is_err());
    }

    #[test]
    fn paste_inverts_crop_inside_region() {
        let img = ImageGrid::from_fn(20, 16, |x, y| (x * 16 + y) as f64);
        let r = Roi { x0: 3, y0: 4, width: 7, height: 5 };
        let back = r.paste_image(&r.crop_image(&img), 20, 16);
        for y in 0..16 {
            for x in 0..20 {
                let inside = (3..10).contains(&x) && (4..9).contains(&y);
                assert_eq!(back.get(x, y), if inside { img.get(x, y) } else { 0.0 });
            }
        }
    }

    #[test]
    fn unmap_inverts_preprocessing_of_constant_maps() {
        let r = Roi { x0: 0, y0: 0, width: 30, height: 18 };
        let m = unmap(&ImageGrid::filled(64, 64, 0.7), &r);
        assert_eq!((m.width(), m.height()), (30, 18));
        assert!(m.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn unmap_recovers_mask_after_round_trip() {
        let r = Roi { x0: 0, y0: 0, width: 40, height: 24 };
        let mask = BinaryMask::from_fn(40, 24, |x, y| (x as f64 - 20.0).powi(2) / 100.0 + (y as f64 - 12.0).powi(2) / 36.0 <= 1.0);
        let pre = preprocess_mask(&mask, 128);
        let prob = ImageGrid::from_fn(128, 128, |x, y| pre.get(x, y) as u8 as f64);
        let back = crate::nn::threshold(&unmap(&prob, &r));
        assert!(crate::metrics::dice(&back, &mask).unwrap() > 0.95);
    }

    #[test]
    fn partners_follow_first_pair() {
        let p = |a: &str, b: &str| LesionPair { a: a.into(), b: b.into(), cluster: Some(0) };
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let m = test_partners(&ids, &[p("a", "b"), p("a", "c"), p("b", "c")]);
        assert_eq!(m["a"], "b");
        assert_eq!(m["b"], "a");
        assert_eq!(m["c"], "a");
        assert_eq!(m["d"], "d");
    }
}
