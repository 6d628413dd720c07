//! Fully connected two-label CRF with Gaussian appearance and smoothness
//! kernels, solved by synchronous mean-field updates.
//!
//! Message passing is exact and quadratic in the pixel count, so the exact
//! mode is limited to [`EXACT_PIXEL_LIMIT`] pixels. Larger images go through
//! [`meanfield_refine_downsampled`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, BinaryMask, ImageGrid};

pub const EXACT_PIXEL_LIMIT: usize = 64 * 64;
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub w_app: f64,
    pub w_smooth: f64,
    /// Spatial bandwidth of the appearance kernel, pixels.
    pub theta_alpha: f64,
    /// Intensity bandwidth of the appearance kernel.
    pub theta_beta: f64,
    /// Spatial bandwidth of the smoothness kernel, pixels.
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { w_app: 5.0, w_smooth: 3.0, theta_alpha: 20.0, theta_beta: 0.1, theta_gamma: 3.0, iterations: 5 }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_app >= 0.0 && self.w_smooth >= 0.0) {
            return Err(Error::InvalidArgument("CRF kernel weights must be non-negative".into()));
        }
        if !(self.theta_alpha > 0.0 && self.theta_beta > 0.0 && self.theta_gamma > 0.0) {
            return Err(Error::InvalidArgument("CRF bandwidths must be positive".into()));
        }
        Ok(())
    }

    /// Pairwise weight between pixels at offset `(dx, dy)` with intensity
    /// difference `di`.
    pub fn kernel(&self, dx: f64, dy: f64, di: f64) -> f64 {
        let d2 = dx * dx + dy * dy;
        self.w_app * (-d2 / (2.0 * self.theta_alpha.powi(2)) - di * di / (2.0 * self.theta_beta.powi(2))).exp()
            + self.w_smooth * (-d2 / (2.0 * self.theta_gamma.powi(2))).exp()
    }
}

/// Per-pixel negative log probabilities, `[background, foreground]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    width: usize,
    height: usize,
    costs: Vec<[f64; 2]>,
}

impl UnaryField {
    pub fn new(width: usize, height: usize, costs: Vec<[f64; 2]>) -> Result<Self> {
        if costs.len() != width * height {
            return Err(Error::DimensionMismatch(format!("{} unary entries for {width}x{height}", costs.len())));
        }
        if costs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("unary costs must be finite".into()));
        }
        Ok(Self { width, height, costs })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn costs(&self) -> &[[f64; 2]] {
        &self.costs
    }

    /// Label with the lower cost per pixel; ties go to background.
    pub fn argmin_mask(&self) -> BinaryMask {
        let labels = self.costs.iter().map(|c| (c[1] < c[0]) as u8).collect();
        BinaryMask::new(self.width, self.height, labels).expect("sized")
    }
}

pub fn unary_from_prob(prob: &ImageGrid) -> UnaryField {
    let costs = prob
        .data()
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            [-(1.0 - p).ln(), -p.ln()]
        })
        .collect();
    UnaryField { width: prob.width(), height: prob.height(), costs }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    /// Foreground marginal per pixel; background is `1 - q`.
    pub q_fg: ImageGrid,
    pub mask: BinaryMask,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    crate::nn::graph::sigmoid(z)
}

fn check_dims(img: &ImageGrid, unary: &UnaryField) -> Result<()> {
    if img.width() != unary.width || img.height() != unary.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs unary {}x{}",
            img.width(),
            img.height(),
            unary.width,
            unary.height
        )));
    }
    Ok(())
}

/// Foreground marginals after initialization and after every iteration.
pub fn meanfield_trace(img: &ImageGrid, unary: &UnaryField, params: &CrfParams) -> Result<Vec<Vec<f64>>> {
    Ok(meanfield_logits(img, unary, params)?.into_iter().map(|z| z.into_iter().map(sigmoid).collect()).collect())
}

/// Log-odds `log Q(fg) - log Q(bg)` after initialization and every iteration.
fn meanfield_logits(img: &ImageGrid, unary: &UnaryField, params: &CrfParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    check_dims(img, unary)?;
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    if n > EXACT_PIXEL_LIMIT {
        return Err(Error::CrfTooLarge { pixels: n, limit: EXACT_PIXEL_LIMIT });
    }
    let base: Vec<f64> = unary.costs.iter().map(|c| c[0] - c[1]).collect();
    let mut trace = vec![base.clone()];
    if params.iterations == 0 {
        return Ok(trace);
    }
    // spatial kernel factors tabulated per offset
    let table = |theta: f64, len: usize| -> Vec<f64> { (0..len).map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp()).collect() };
    let span = w.max(h);
    let (ax, gx) = (table(params.theta_alpha, span), table(params.theta_gamma, span));
    let inv_beta = 1.0 / (2.0 * params.theta_beta * params.theta_beta);
    let pix = img.data();
    let mut q: Vec<f64> = base.iter().map(|&z| sigmoid(z)).collect();
    for _ in 0..params.iterations {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let (xi, yi) = (i % w, i / w);
            // sum_j k_ij (Q_j(bg) - Q_j(fg)) = sum_j k_ij (1 - 2 Q_j(fg))
            let mut acc = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (xj, yj) = (j % w, j / w);
                let (dx, dy) = (xi.abs_diff(xj), yi.abs_diff(yj));
                let di = pix[i] - pix[j];
                let k = params.w_app * ax[dx] * ax[dy] * (-di * di * inv_beta).exp() + params.w_smooth * gx[dx] * gx[dy];
                acc += k * (1.0 - 2.0 * q[j]);
            }
            // message to fg uses Q(bg) of neighbors and vice versa
            z[i] = base[i] - acc;
        }
        q = z.iter().map(|&v| sigmoid(v)).collect();
        trace.push(z);
    }
    Ok(trace)
}

/// Exact dense mean-field refinement. The mask is the per-pixel argmax of
/// Q with ties going to background.
pub fn meanfield_refine(img: &ImageGrid, unary: &UnaryField, params: &CrfParams) -> Result<CrfOutput> {
    let z = meanfield_logits(img, unary, params)?.pop().expect("initial state present");
    let (w, h) = (img.width(), img.height());
    let mask = BinaryMask::new(w, h, z.iter().map(|&v| (v > 0.0) as u8).collect())?;
    let q_fg = ImageGrid::new(w, h, z.into_iter().map(sigmoid).collect())?;
    Ok(CrfOutput { q_fg, mask })
}

/// Refinement on a grid downsampled by `factor`. Spatial bandwidths are
/// divided by the factor so kernels keep their extent in original pixels.
pub fn meanfield_refine_downsampled(img: &ImageGrid, unary: &UnaryField, params: &CrfParams, factor: usize) -> Result<CrfOutput> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsampling factor must be at least 1".into()));
    }
    check_dims(img, unary)?;
    if factor == 1 {
        return meanfield_refine(img, unary, params);
    }
    let (w, h) = (img.width(), img.height());
    let (sw, sh) = (w.div_ceil(factor), h.div_ceil(factor));
    let small_img = resize_bilinear(img, sw, sh);
    let plane = |l: usize| ImageGrid::new(w, h, unary.costs.iter().map(|c| c[l]).collect()).expect("sized");
    let (bg, fg) = (resize_bilinear(&plane(0), sw, sh), resize_bilinear(&plane(1), sw, sh));
    let small_unary = UnaryField::new(sw, sh, bg.data().iter().zip(fg.data()).map(|(&b, &f)| [b, f]).collect())?;
    let f = factor as f64;
    let scaled = CrfParams { theta_alpha: params.theta_alpha / f, theta_gamma: params.theta_gamma / f, ..*params };
    let small = meanfield_refine(&small_img, &small_unary, &scaled)?;
    let q_fg = resize_bilinear(&small.q_fg, w, h);
    let mask = BinaryMask::from_fn(w, h, |x, y| q_fg.get(x, y) > 0.5);
    Ok(CrfOutput { q_fg, mask })
}

/// Refines a foreground probability map, downsampling only as far as needed
/// to stay within the exact-mode limit.
pub fn refine_probability(img: &ImageGrid, prob: &ImageGrid, params: &CrfParams) -> Result<CrfOutput> {
    let unary = unary_from_prob(prob);
    let mut factor = 1;
    while img.width().div_ceil(factor) * img.height().div_ceil(factor) > EXACT_PIXEL_LIMIT {
        factor += 1;
    }
    meanfield_refine_downsampled(img, &unary, params, factor)
}
