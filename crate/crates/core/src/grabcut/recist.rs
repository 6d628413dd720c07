//! RECIST diameter annotations and the trimap seeds derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grabcut::GrabcutConfig;
use crate::grid::{Trimap, TrimapLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Point {
        Point::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(a: Point, b: Point) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    fn point_distance(&self, p: Point) -> f64 {
        let (dx, dy) = (self.b.x - self.a.x, self.b.y - self.a.y);
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            return self.a.dist(p);
        }
        let t = (((p.x - self.a.x) * dx + (p.y - self.a.y) * dy) / len2).clamp(0.0, 1.0);
        p.dist(Point::new(self.a.x + t * dx, self.a.y + t * dy))
    }

    /// Minimum Euclidean distance between two segments (0 when they cross).
    pub fn distance_to(&self, other: &Segment) -> f64 {
        let o = |p: Point, q: Point, r: Point| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        let d1 = o(self.a, self.b, other.a);
        let d2 = o(self.a, self.b, other.b);
        let d3 = o(other.a, other.b, self.a);
        let d4 = o(other.a, other.b, self.b);
        if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
            return 0.0;
        }
        self.point_distance(other.a)
            .min(self.point_distance(other.b))
            .min(other.point_distance(self.a))
            .min(other.point_distance(self.b))
    }
}

/// Major and minor lesion diameters marked on one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecistAnnotation {
    pub image_id: String,
    pub major: Segment,
    pub minor: Segment,
}

impl RecistAnnotation {
    /// Checks `|major| >= |minor| > 0`.
    pub fn new(image_id: impl Into<String>, major: Segment, minor: Segment) -> Result<Self> {
        let (lmaj, lmin) = (major.length(), minor.length());
        if !(lmin > 0.0) {
            return Err(Error::DegenerateRecist(format!("minor axis has zero length ({lmin})")));
        }
        if lmaj < lmin {
            return Err(Error::DegenerateRecist(format!("major axis ({lmaj:.3}) shorter than minor ({lmin:.3})")));
        }
        Ok(Self { image_id: image_id.into(), major, minor })
    }

    pub fn endpoints(&self) -> [Point; 4] {
        [self.major.a, self.major.b, self.minor.a, self.minor.b]
    }

    /// Whether the diameters meet within `tolerance` pixels.
    pub fn crosses(&self, tolerance: f64) -> bool {
        self.major.distance_to(&self.minor) <= tolerance
    }

    /// Axis-aligned bounding box of the four endpoints: (xmin, ymin, xmax, ymax).
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let pts = self.endpoints();
        let xs = pts.iter().map(|p| p.x);
        let ys = pts.iter().map(|p| p.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> RecistAnnotation {
        let t = |s: Segment| Segment::new(s.a.translate(dx, dy), s.b.translate(dx, dy));
        RecistAnnotation { image_id: self.image_id.clone(), major: t(self.major), minor: t(self.minor) }
    }

    /// Maps coordinates through pad-to-square followed by a resize to `size`.
    pub fn to_preprocessed(&self, width: usize, height: usize, size: usize) -> RecistAnnotation {
        let s = width.max(height);
        let (ox, oy) = crate::grid::square_offsets(width, height);
        let scale = if s > 1 { (size as f64 - 1.0) / (s as f64 - 1.0) } else { 1.0 };
        let m = |p: Point| Point::new((p.x + ox as f64) * scale, (p.y + oy as f64) * scale);
        let t = |seg: Segment| Segment::new(m(seg.a), m(seg.b));
        RecistAnnotation { image_id: self.image_id.clone(), major: t(self.major), minor: t(self.minor) }
    }
}

/// Quadrilateral with vertices in counter-clockwise angular order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Quad {
    pub vertices: [Point; 4],
}

impl Quad {
    pub fn from_recist(ann: &RecistAnnotation) -> Quad {
        let mut v = ann.endpoints();
        let c = centroid(&v);
        v.sort_by(|p, q| {
            let ap = (p.y - c.y).atan2(p.x - c.x);
            let aq = (q.y - c.y).atan2(q.x - c.x);
            ap.total_cmp(&aq)
        });
        Quad { vertices: v }
    }

    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let mut s = 0.0;
        for i in 0..4 {
            let (p, q) = (v[i], v[(i + 1) % 4]);
            s += p.x * q.y - q.x * p.y;
        }
        0.5 * s
    }

    pub fn scaled(&self, factor: f64) -> Quad {
        let c = centroid(&self.vertices);
        let v = self.vertices.map(|p| Point::new(c.x + factor * (p.x - c.x), c.y + factor * (p.y - c.y)));
        Quad { vertices: v }
    }

    /// Inclusive containment for a counter-clockwise convex quad.
    ///
    /// Four RECIST endpoints sorted by angle can form a non-convex shape when
    /// the diameters cross far from their midpoints; containment then follows
    /// the even-odd rule.
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        let mut all_left = true;
        for i in 0..4 {
            let (a, b) = (v[i], v[(i + 1) % 4]);
            let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            if cross < -1e-9 {
                all_left = false;
                break;
            }
        }
        if all_left || self.is_convex() {
            return all_left;
        }
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (v[i], v[(i + 3) % 4]);
            if (a.y > p.y) != (b.y > p.y) {
                let xi = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn is_convex(&self) -> bool {
        let v = &self.vertices;
        (0..4).all(|i| {
            let (a, b, c) = (v[i], v[(i + 1) % 4], v[(i + 2) % 4]);
            (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x) >= 0.0
        })
    }
}

fn centroid(pts: &[Point; 4]) -> Point {
    Point::new(pts.iter().map(|p| p.x).sum::<f64>() / 4.0, pts.iter().map(|p| p.y).sum::<f64>() / 4.0)
}

/// Builds GrabCut seeds from a RECIST cross.
///
/// * DefiniteFg: the endpoint quadrilateral shrunk toward its centroid by
///   `fg_seed_shrink` (if that covers no pixel center, the pixel nearest the
///   centroid).
/// * ProbableFg: the rest of the unshrunk quadrilateral.
/// * DefiniteBg: everything outside the endpoint bounding box grown by
///   `bbox_expand` pixels.
/// * ProbableBg: the remainder.
pub fn trimap_from_recist(ann: &RecistAnnotation, width: usize, height: usize, cfg: &GrabcutConfig) -> Result<Trimap> {
    cfg.validate()?;
    for p in ann.endpoints() {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64) {
            return Err(Error::AnnotationOutOfBounds(format!(
                "{}: endpoint ({:.2}, {:.2}) outside {width}x{height}",
                ann.image_id, p.x, p.y
            )));
        }
    }
    let quad = Quad::from_recist(ann);
    if quad.area().abs() < 1e-6 {
        return Err(Error::DegenerateRecist(format!("{}: endpoints are collinear", ann.image_id)));
    }
    if !ann.crosses(cfg.cross_tolerance) {
        return Err(Error::DegenerateRecist(format!(
            "{}: diameters do not cross (gap {:.2} px > {:.2})",
            ann.image_id,
            ann.major.distance_to(&ann.minor),
            cfg.cross_tolerance
        )));
    }
    let inner = quad.scaled(cfg.fg_seed_shrink);
    let (x0, y0, x1, y1) = ann.bbox();
    let e = cfg.bbox_expand;
    let (bx0, by0, bx1, by1) = (x0 - e, y0 - e, x1 + e, y1 + e);

    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let p = Point::new(x as f64, y as f64);
            let label = if inner.contains(p) {
                TrimapLabel::DefiniteFg
            } else if quad.contains(p) {
                TrimapLabel::ProbableFg
            } else if p.x < bx0 || p.x > bx1 || p.y < by0 || p.y > by1 {
                TrimapLabel::DefiniteBg
            } else {
                TrimapLabel::ProbableBg
            };
            labels.push(label);
        }
    }
    if !labels.contains(&TrimapLabel::DefiniteFg) {
        let c = centroid(&quad.vertices);
        let (cx, cy) = (c.x.round() as usize, c.y.round() as usize);
        labels[cy.min(height - 1) * width + cx.min(width - 1)] = TrimapLabel::DefiniteFg;
    }
    Trimap::new(width, height, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross(major: (f64, f64, f64, f64), minor: (f64, f64, f64, f64)) -> RecistAnnotation {
        RecistAnnotation::new(
            "t",
            Segment::new(Point::new(major.0, major.1), Point::new(major.2, major.3)),
            Segment::new(Point::new(minor.0, minor.1), Point::new(minor.2, minor.3)),
        )
        .unwrap()
    }

    /// Ray-casting point-in-polygon, written independently of `Quad`.
    fn ray_cast(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
        // boundary counts as inside
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
            let within = x >= a.0.min(b.0) - 1e-9 && x <= a.0.max(b.0) + 1e-9 && y >= a.1.min(b.1) - 1e-9 && y <= a.1.max(b.1) + 1e-9;
            if cross.abs() < 1e-9 && within {
                return true;
            }
        }
        let mut inside = false;
        let n = poly.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    #[test]
    fn diamond_trimap_matches_rasterization_oracle() {
        let ann = cross((10.0, 50.0, 90.0, 50.0), (50.0, 10.0, 50.0, 90.0));
        let cfg = GrabcutConfig::default();
        let t = trimap_from_recist(&ann, 128, 128, &cfg).unwrap();
        // centroid (50, 50); shrink 0.8 -> vertices at distance 32
        let inner = [(18.0, 50.0), (50.0, 18.0), (82.0, 50.0), (50.0, 82.0)];
        let outer = [(10.0, 50.0), (50.0, 10.0), (90.0, 50.0), (50.0, 90.0)];
        for y in 0..128 {
            for x in 0..128 {
                let (fx, fy) = (x as f64, y as f64);
                let expected = if ray_cast(&inner, fx, fy) {
                    TrimapLabel::DefiniteFg
                } else if ray_cast(&outer, fx, fy) {
                    TrimapLabel::ProbableFg
                } else if !(-10.0..=110.0).contains(&fx) || !(-10.0..=110.0).contains(&fy) {
                    TrimapLabel::DefiniteBg
                } else {
                    TrimapLabel::ProbableBg
                };
                assert_eq!(t.get(x, y), expected, "pixel ({x},{y})");
            }
        }
        assert!(t.count(TrimapLabel::DefiniteBg) > 0);
    }

    #[test]
    fn shrink_one_leaves_no_probable_fg() {
        let ann = cross((10.0, 50.0, 90.0, 50.0), (50.0, 20.0, 50.0, 80.0));
        let cfg = GrabcutConfig { fg_seed_shrink: 1.0, ..GrabcutConfig::default() };
        let t = trimap_from_recist(&ann, 128, 128, &cfg).unwrap();
        assert_eq!(t.count(TrimapLabel::ProbableFg), 0);
        assert!(t.count(TrimapLabel::DefiniteFg) > 0);
    }

    #[test]
    fn oversized_expansion_is_rejected() {
        let ann = cross((10.0, 50.0, 90.0, 50.0), (50.0, 20.0, 50.0, 80.0));
        let cfg = GrabcutConfig { bbox_expand: 500.0, ..GrabcutConfig::default() };
        assert!(matches!(trimap_from_recist(&ann, 128, 128, &cfg), Err(Error::InvalidTrimap(_))));
    }

    #[test]
    fn out_of_bounds_and_degenerate_errors() {
        let cfg = GrabcutConfig::default();
        let ann = cross((10.0, 50.0, 130.0, 50.0), (50.0, 20.0, 50.0, 80.0));
        assert!(matches!(trimap_from_recist(&ann, 128, 128, &cfg), Err(Error::AnnotationOutOfBounds(_))));
        let ann = cross((10.0, 50.0, 90.0, 50.0), (30.0, 50.0, 60.0, 50.0));
        assert!(matches!(trimap_from_recist(&ann, 128, 128, &cfg), Err(Error::DegenerateRecist(_))));
        let bad = RecistAnnotation::new(
            "x",
            Segment::new(Point::new(0.0, 0.0), Point::new(1.0, 0.0)),
            Segment::new(Point::new(0.0, 0.0), Point::new(0.0, 5.0)),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn non_crossing_diameters_are_degenerate() {
        let cfg = GrabcutConfig::default();
        let ann = cross((10.0, 50.0, 90.0, 50.0), (50.0, 60.0, 52.0, 80.0));
        assert!(!ann.crosses(cfg.cross_tolerance));
        assert!(matches!(trimap_from_recist(&ann, 128, 128, &cfg), Err(Error::DegenerateRecist(_))));
    }

    #[test]
    fn tiny_lesion_still_has_a_definite_seed() {
        let ann = cross((20.0, 20.0, 22.0, 20.0), (21.0, 19.5, 21.0, 20.5));
        let t = trimap_from_recist(&ann, 64, 64, &GrabcutConfig::default()).unwrap();
        assert!(t.count(TrimapLabel::DefiniteFg) >= 1);
    }
}
