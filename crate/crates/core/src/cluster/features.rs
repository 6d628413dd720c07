use crate::error::{Error, Result};
use crate::grabcut::RecistAnnotation;
use crate::grid::ImageGrid;

pub const HISTOGRAM_BINS: usize = 32;
/// histogram + major length + minor length + aspect + mean + std
pub const FEATURE_DIM: usize = HISTOGRAM_BINS + 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionFeature {
    pub lesion_id: String,
    pub vector: Vec<f64>,
}

/// Integer pixel window `[x0, x1] x [y0, y1]` covering the RECIST endpoints,
/// clipped to the image.
pub fn recist_window(ann: &RecistAnnotation, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let (xmin, ymin, xmax, ymax) = ann.bbox();
    if !(xmax - xmin > 0.0 && ymax - ymin > 0.0) {
        return Err(Error::DegenerateRecist(format!("{}: RECIST bounding box has zero area", ann.image_id)));
    }
    let clip = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64) as usize;
    let (x0, x1) = (clip(xmin.floor(), width), clip(xmax.ceil(), width));
    let (y0, y1) = (clip(ymin.floor(), height), clip(ymax.ceil(), height));
    if xmin.floor() > (width - 1) as f64 || ymin.floor() > (height - 1) as f64 || xmax < 0.0 || ymax < 0.0 {
        return Err(Error::AnnotationOutOfBounds(format!("{}: RECIST box outside image", ann.image_id)));
    }
    Ok((x0, y0, x1, y1))
}

/// Handcrafted appearance descriptor over the RECIST bounding box.
///
/// Layout: 32-bin intensity histogram on [0, 1] normalized to unit mass,
/// then major length, minor length, minor/major ratio, box mean and box
/// population standard deviation.
pub fn extract_feature(img: &ImageGrid, ann: &RecistAnnotation) -> Result<LesionFeature> {
    let (x0, y0, x1, y1) = recist_window(ann, img.width(), img.height())?;
    let mut hist = [0.0f64; HISTOGRAM_BINS];
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = img.get(x, y);
            let bin = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            hist[bin] += 1.0;
            sum += v;
            count += 1;
        }
    }
    let n = count as f64;
    let mean = sum / n;
    let mut var = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            var += (img.get(x, y) - mean).powi(2);
        }
    }
    let std = (var / n).sqrt();
    let (major, minor) = (ann.major.length(), ann.minor.length());
    let mut vector: Vec<f64> = hist.iter().map(|c| c / n).collect();
    vector.extend_from_slice(&[major, minor, minor / major, mean, std]);
    Ok(LesionFeature { lesion_id: ann.image_id.clone(), vector })
}

/// Column-wise z-scoring; constant columns become zero.
pub fn standardize(features: &[LesionFeature]) -> Vec<LesionFeature> {
    if features.is_empty() {
        return Vec::new();
    }
    let d = features[0].vector.len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(&f.vector) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; d];
    for f in features {
        for j in 0..d {
            sd[j] += (f.vector[j] - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    features
        .iter()
        .map(|f| LesionFeature {
            lesion_id: f.lesion_id.clone(),
            vector: (0..d).map(|j| if sd[j] > 1e-12 { (f.vector[j] - mean[j]) / sd[j] } else { 0.0 }).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grabcut::{Point, Segment};

    fn ann(dx: f64, dy: f64) -> RecistAnnotation {
        RecistAnnotation::new(
            "l",
            Segment::new(Point::new(10.0 + dx, 20.0 + dy), Point::new(30.0 + dx, 20.0 + dy)),
            Segment::new(Point::new(20.0 + dx, 14.0 + dy), Point::new(20.0 + dx, 26.0 + dy)),
        )
        .unwrap()
    }

    #[test]
    fn uniform_box_is_one_hot() {
        let img = ImageGrid::filled(64, 64, 0.5);
        let f = extract_feature(&img, &ann(0.0, 0.0)).unwrap();
        assert_eq!(f.vector.len(), FEATURE_DIM);
        for (b, &v) in f.vector[..HISTOGRAM_BINS].iter().enumerate() {
            assert_eq!(v, if b == 16 { 1.0 } else { 0.0 });
        }
        assert_eq!(f.vector[HISTOGRAM_BINS], 20.0);
        assert_eq!(f.vector[HISTOGRAM_BINS + 1], 12.0);
        assert!((f.vector[HISTOGRAM_BINS + 2] - 0.6).abs() < 1e-15);
        assert_eq!(f.vector[HISTOGRAM_BINS + 3], 0.5);
        assert_eq!(f.vector[HISTOGRAM_BINS + 4], 0.0);
    }

    #[test]
    fn two_level_box_counts() {
        // box spans 20 columns, alternating intensity by column
        let img = ImageGrid::from_fn(64, 64, |x, _| if x % 2 == 0 { 0.2 } else { 0.8 });
        let a = RecistAnnotation::new(
            "l",
            Segment::new(Point::new(10.0, 20.0), Point::new(29.0, 20.0)),
            Segment::new(Point::new(20.0, 14.0), Point::new(20.0, 26.0)),
        )
        .unwrap();
        let f = extract_feature(&img, &a).unwrap();
        // 0.2 * 32 = 6.4 -> bin 6, 0.8 * 32 = 25.6 -> bin 25
        assert!((f.vector[6] - 0.5).abs() < 1e-15);
        assert!((f.vector[25] - 0.5).abs() < 1e-15);
        assert!((f.vector[HISTOGRAM_BINS + 3] - 0.5).abs() < 1e-12);
        assert!((f.vector[HISTOGRAM_BINS + 4] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn identical_boxes_identical_features_and_translation_consistent() {
        let pattern = |x: usize, y: usize| ((x * 13 + y * 7) % 17) as f64 / 16.0;
        let a = ImageGrid::from_fn(64, 64, pattern);
        let b = ImageGrid::from_fn(64, 64, |x, y| if x < 40 && y < 40 { pattern(x, y) } else { 0.0 });
        assert_eq!(extract_feature(&a, &ann(0.0, 0.0)).unwrap(), extract_feature(&b, &ann(0.0, 0.0)).unwrap());

        let shifted = ImageGrid::from_fn(64, 64, |x, y| if x >= 5 && y >= 3 { pattern(x - 5, y - 3) } else { 0.0 });
        let f0 = extract_feature(&a, &ann(0.0, 0.0)).unwrap();
        let f1 = extract_feature(&shifted, &ann(5.0, 3.0)).unwrap();
        for (u, v) in f0.vector.iter().zip(&f1.vector) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let img = ImageGrid::filled(16, 16, 0.1);
        let flat = RecistAnnotation::new(
            "z",
            Segment::new(Point::new(2.0, 5.0), Point::new(12.0, 5.0)),
            Segment::new(Point::new(4.0, 5.0), Point::new(8.0, 5.0)),
        )
        .unwrap();
        assert!(extract_feature(&img, &flat).is_err());
    }
}
