//! Synthetic CT-like lesion images with exact ground truth.
//!
//! Each phantom is a single-channel image holding one elliptical lesion on a
//! textured background. The RECIST annotation is derived from the rendered
//! ground-truth mask: the major diameter is the longest chord between
//! foreground pixels and the minor diameter is the longest chord
//! perpendicular to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grabcut::{Point, RecistAnnotation, Segment};
use crate::grid::{BinaryMask, ImageGrid};
use crate::rng::SeededRng;

/// Appearance family of a lesion. Ranges are sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    /// Semi-major axis range, pixels.
    pub major: [f64; 2],
    /// Semi-minor axis as a fraction of the semi-major axis.
    pub aspect: [f64; 2],
    pub lesion_intensity: [f64; 2],
    pub background_intensity: [f64; 2],
    /// Standard deviation of per-pixel noise inside the lesion.
    pub texture_sigma: f64,
    /// Amplitude of the smooth background undulation.
    pub background_wave: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub count: usize,
    pub image_size: usize,
    /// Standard deviation of acquisition noise over the whole image.
    pub noise_sigma: f64,
    /// Number of lesion-like distractor blobs per image.
    pub distractors: usize,
    pub archetypes: Vec<Archetype>,
}

fn archetype(name: &str, major: [f64; 2], aspect: [f64; 2], les: [f64; 2], bg: [f64; 2], tex: f64, wave: f64) -> Archetype {
    Archetype {
        name: name.into(),
        major,
        aspect,
        lesion_intensity: les,
        background_intensity: bg,
        texture_sigma: tex,
        background_wave: wave,
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 96,
            noise_sigma: 0.02,
            distractors: 1,
            archetypes: vec![
                archetype("small-bright", [6.0, 9.0], [0.8, 1.0], [0.78, 0.86], [0.34, 0.40], 0.01, 0.03),
                archetype("large-dark", [16.0, 21.0], [0.45, 0.6], [0.14, 0.22], [0.48, 0.54], 0.02, 0.04),
                archetype("round-textured", [10.0, 14.0], [0.8, 1.0], [0.56, 0.64], [0.26, 0.32], 0.06, 0.03),
                archetype("oval-bright", [12.0, 16.0], [0.4, 0.55], [0.88, 0.95], [0.55, 0.62], 0.015, 0.06),
            ],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() {
            return Err(Error::Config("phantom spec needs at least one archetype".into()));
        }
        for a in &self.archetypes {
            let ranges = [a.major, a.aspect, a.lesion_intensity, a.background_intensity];
            if ranges.iter().any(|r| !(r[0] <= r[1])) {
                return Err(Error::Config(format!("archetype {}: ranges must be ordered", a.name)));
            }
            if a.major[0] * a.aspect[0] < 2.0 {
                return Err(Error::Config(format!("archetype {}: axes must be at least 2 pixels", a.name)));
            }
            let ints = [a.lesion_intensity, a.background_intensity];
            if ints.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("archetype {}: intensities must lie in [0, 1]", a.name)));
            }
            if 2.0 * a.major[1] + 8.0 > self.image_size as f64 {
                return Err(Error::Config(format!("archetype {}: lesion does not fit a {} px image", a.name, self.image_size)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub id: String,
    pub archetype: usize,
    pub image: ImageGrid,
    pub mask: BinaryMask,
    pub recist: RecistAnnotation,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius; 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Fractional coverage with a one-pixel soft edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let d = (self.radius(x, y) - 1.0) * self.b;
        (0.5 - d).clamp(0.0, 1.0)
    }
}

pub fn lesion_id(i: usize) -> String {
    format!("lesion_{i:04}")
}

/// Deterministic dataset for `spec` and `seed`; lesion `i` uses archetype
/// `i mod archetypes`.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Vec<Phantom>> {
    spec.validate()?;
    let base = SeededRng::new(seed);
    (0..spec.count).map(|i| generate_one(spec, i, &mut base.fork(i as u64))).collect()
}

fn generate_one(spec: &PhantomSpec, index: usize, rng: &mut SeededRng) -> Result<Phantom> {
    let k = index % spec.archetypes.len();
    let arch = &spec.archetypes[k];
    let size = spec.image_size;
    let s = size as f64;
    let a = rng.uniform_range(arch.major[0], arch.major[1]);
    let b = a * rng.uniform_range(arch.aspect[0], arch.aspect[1]);
    let jitter = (s / 2.0 - a - 24.0).max(0.0).min(6.0);
    let lesion = Ellipse {
        cx: s / 2.0 + rng.uniform_range(-jitter, jitter),
        cy: s / 2.0 + rng.uniform_range(-jitter, jitter),
        a,
        b,
        angle: rng.uniform_range(0.0, std::f64::consts::PI),
    };
    let les_i = rng.uniform_range(arch.lesion_intensity[0], arch.lesion_intensity[1]);
    let bg_i = rng.uniform_range(arch.background_intensity[0], arch.background_intensity[1]);
    let (fx, fy, phase) = (rng.uniform_range(1.0, 3.0), rng.uniform_range(1.0, 3.0), rng.uniform_range(0.0, 6.28));
    let mut blobs = Vec::new();
    for _ in 0..spec.distractors {
        // place away from the lesion so the RECIST region stays clean
        let r = rng.uniform_range(3.0, 6.0);
        let ang = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        let dist = (a + 24.0 + r).min(s / 2.0 - r - 1.0);
        let blob = Ellipse { cx: lesion.cx + dist * ang.cos(), cy: lesion.cy + dist * ang.sin(), a: r, b: r, angle: 0.0 };
        let contrast = rng.uniform_range(-0.2, 0.2);
        blobs.push((blob, contrast));
    }
    let mut data = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let wave = arch.background_wave * ((fx * xf / s * std::f64::consts::TAU + phase).sin() * (fy * yf / s * std::f64::consts::TAU).cos());
            let mut v = bg_i + wave;
            for (blob, contrast) in &blobs {
                v += contrast * blob.coverage(xf, yf);
            }
            let cov = lesion.coverage(xf, yf);
            v += cov * (les_i - v + arch.texture_sigma * rng.normal());
            v += spec.noise_sigma * rng.normal();
            data.push(v.clamp(0.0, 1.0));
            labels.push((lesion.radius(xf, yf) <= 1.0) as u8);
        }
    }
    let id = lesion_id(index);
    let image = ImageGrid::new(size, size, data)?;
    let mask = BinaryMask::new(size, size, labels)?;
    let recist = recist_from_mask(&mask, &id)?;
    Ok(Phantom { id, archetype: k, image, mask, recist })
}

fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    mask.foreground()
        .into_iter()
        .filter(|&(x, y)| {
            x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1)
        })
        .collect()
}

/// Longest chord between foreground pixel centers, first pair in scan order
/// on ties.
pub fn major_axis(mask: &BinaryMask) -> Option<Segment> {
    let pts = boundary_pixels(mask);
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = (pts[i].0 as f64 - pts[j].0 as f64).powi(2) + (pts[i].1 as f64 - pts[j].1 as f64).powi(2);
            if best.map_or(true, |(b, _, _)| d > b) {
                best = Some((d, i, j));
            }
        }
    }
    let p = |q: (usize, usize)| Point::new(q.0 as f64, q.1 as f64);
    best.map(|(_, i, j)| Segment::new(p(pts[i]), p(pts[j])))
}

/// Longest chord perpendicular to `major` through foreground pixels,
/// sampled at half-pixel steps along and across the major axis.
pub fn minor_axis(mask: &BinaryMask, major: &Segment) -> Option<Segment> {
    let len = major.length();
    if len == 0.0 {
        return None;
    }
    let (ux, uy) = ((major.b.x - major.a.x) / len, (major.b.y - major.a.y) / len);
    let (nx, ny) = (-uy, ux);
    let inside = |x: f64, y: f64| {
        let (xi, yi) = (x.round(), y.round());
        xi >= 0.0 && yi >= 0.0 && (xi as usize) < mask.width() && (yi as usize) < mask.height() && mask.get(xi as usize, yi as usize)
    };
    let mut best: Option<(f64, Segment)> = None;
    let steps = (len * 2.0).ceil() as usize;
    for k in 0..=steps {
        let t = (k as f64 * 0.5).min(len);
        let (px, py) = (major.a.x + ux * t, major.a.y + uy * t);
        if !inside(px, py) {
            continue;
        }
        let mut extent = [0.0f64; 2];
        for (side, dir) in [1.0f64, -1.0].into_iter().enumerate() {
            let mut s = 0.0;
            while inside(px + dir * nx * (s + 0.5), py + dir * ny * (s + 0.5)) {
                s += 0.5;
            }
            extent[side] = s;
        }
        let mut chord = extent[0] + extent[1];
        if chord > len {
            // sampling overshoots pixel centers; keep minor no longer than major
            let shrink = len / chord;
            extent = [extent[0] * shrink, extent[1] * shrink];
            chord = len;
        }
        if best.as_ref().map_or(true, |(b, _)| chord > *b) {
            let seg = Segment::new(
                Point::new(px + nx * extent[0], py + ny * extent[0]),
                Point::new(px - nx * extent[1], py - ny * extent[1]),
            );
            best = Some((chord, seg));
        }
    }
    best.filter(|(c, _)| *c > 0.0).map(|(_, s)| s)
}

pub fn recist_from_mask(mask: &BinaryMask, id: &str) -> Result<RecistAnnotation> {
    let major = major_axis(mask).ok_or_else(|| Error::DegenerateRecist(format!("{id}: mask has fewer than two pixels")))?;
    let minor = minor_axis(mask, &major).ok_or_else(|| Error::DegenerateRecist(format!("{id}: mask has no perpendicular extent")))?;
    RecistAnnotation::new(id, major, minor)
}
