//! Raster types for CT slices, lesion masks and GrabCut seed maps, plus the
//! preprocessing transforms applied before the network sees an image.
//!
//! Pixel `(x, y)` lives at `data[y * width + x]` and its center is at the
//! real coordinate `(x, y)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite intensity at index {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sub-image starting at `(x0, y0)`. Panics when the window leaves the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageGrid {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop window out of range");
        ImageGrid::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask data length {} != {width}x{height}",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("mask labels must be 0 or 1".into()));
        }
        Ok(Self { width, height, labels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y) as u8);
            }
        }
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.labels[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.labels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    /// Foreground pixel coordinates in raster order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other) && self.labels.iter().zip(&other.labels).all(|(&a, &b)| a <= b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TrimapLabel {
    DefiniteBg = 0,
    ProbableBg = 1,
    ProbableFg = 2,
    DefiniteFg = 3,
}

impl TrimapLabel {
    pub fn is_definite(self) -> bool {
        matches!(self, TrimapLabel::DefiniteBg | TrimapLabel::DefiniteFg)
    }

    pub fn is_foreground(self) -> bool {
        matches!(self, TrimapLabel::ProbableFg | TrimapLabel::DefiniteFg)
    }
}

/// Four-level seed map. Construction enforces at least one definite
/// foreground and one definite background pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    width: usize,
    height: usize,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn new(width: usize, height: usize, labels: Vec<TrimapLabel>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "trimap length {} != {width}x{height}",
                labels.len()
            )));
        }
        if !labels.contains(&TrimapLabel::DefiniteFg) {
            return Err(Error::InvalidTrimap("no definite foreground pixel".into()));
        }
        if !labels.contains(&TrimapLabel::DefiniteBg) {
            return Err(Error::InvalidTrimap("no definite background pixel".into()));
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> TrimapLabel {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Initial hard labeling: probable and definite foreground are 1.
    pub fn initial_mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|l| l.is_foreground() as u8).collect(),
        }
    }
}

/// Centers `img` on an S x S canvas, S = max(width, height), filling new
/// pixels with `fill`.
pub fn pad_to_square(img: &ImageGrid, fill: f64) -> ImageGrid {
    let (w, h) = (img.width, img.height);
    let s = w.max(h);
    let (ox, oy) = square_offsets(w, h);
    let mut out = ImageGrid::filled(s, s, fill);
    for y in 0..h {
        let src = &img.data[y * w..(y + 1) * w];
        let row = (y + oy) * s + ox;
        out.data[row..row + w].copy_from_slice(src);
    }
    out
}

/// Mask counterpart of [`pad_to_square`]; new pixels are background.
pub fn pad_mask_to_square(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let s = w.max(h);
    let (ox, oy) = square_offsets(w, h);
    let mut out = BinaryMask::zeros(s, s);
    for y in 0..h {
        for x in 0..w {
            out.labels[(y + oy) * s + x + ox] = mask.labels[y * w + x];
        }
    }
    out
}

/// Top-left offset of the original content inside the padded square.
pub fn square_offsets(width: usize, height: usize) -> (usize, usize) {
    let s = width.max(height);
    ((s - width) / 2, (s - height) / 2)
}

fn align_corners_scale(src: usize, dst: usize) -> f64 {
    if dst > 1 {
        (src as f64 - 1.0) / (dst as f64 - 1.0)
    } else {
        0.0
    }
}

/// Bilinear resampling with corner-aligned sampling: output pixel `i` reads
/// source coordinate `i * (in - 1) / (out - 1)` along each axis.
pub fn resize_bilinear(img: &ImageGrid, out_w: usize, out_h: usize) -> ImageGrid {
    assert!(out_w >= 1 && out_h >= 1, "output size must be positive");
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let sx = align_corners_scale(img.width, out_w);
    let sy = align_corners_scale(img.height, out_h);
    let mut out = ImageGrid::filled(out_w, out_h, 0.0);
    for y in 0..out_h {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
            let bottom = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
            out.data[y * out_w + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

/// Nearest-neighbor resampling; output pixel `i` reads source index
/// `floor((i + 0.5) * in / out)`.
pub fn resize_mask_nearest(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    assert!(out_w >= 1 && out_h >= 1, "output size must be positive");
    let map = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    BinaryMask::from_fn(out_w, out_h, |x, y| {
        mask.get(map(x, mask.width, out_w), map(y, mask.height, out_h))
    })
}

/// Per-image min-max scaling to [0, 1]. A constant image maps to zeros.
pub fn normalize(img: &ImageGrid) -> ImageGrid {
    let lo = img.min();
    let hi = img.max();
    let range = hi - lo;
    let data = if range > 0.0 {
        img.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; img.data.len()]
    };
    ImageGrid { width: img.width, height: img.height, data }
}

/// Morphological dilation with a Euclidean disc of the given radius.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = BinaryMask::zeros(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.labels[(ny * w + nx) as usize] = 1;
                }
            }
        }
    }
    out
}

/// Pixel normalization scheme applied after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    MinMax,
    None,
}

/// pad (fill = image minimum) -> bilinear resize -> normalize.
pub fn preprocess_image(img: &ImageGrid, size: usize, mode: NormalizeMode) -> ImageGrid {
    let padded = pad_to_square(img, img.min());
    let resized = resize_bilinear(&padded, size, size);
    match mode {
        NormalizeMode::MinMax => normalize(&resized),
        NormalizeMode::None => resized,
    }
}

/// pad (background) -> nearest resize.
pub fn preprocess_mask(mask: &BinaryMask, size: usize) -> BinaryMask {
    resize_mask_nearest(&pad_mask_to_square(mask), size, size)
}
