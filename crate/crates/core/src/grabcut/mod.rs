//! Initial lesion masks from RECIST crosses via GrabCut.
//!
//! Each iteration fits foreground and background intensity mixtures on the
//! current labeling, encodes the energy
//!
//! ```text
//! E(L) = sum_p NLL_{L_p}(I_p) + sum_{p~q} gamma * exp(-beta (I_p - I_q)^2) / dist(p, q) * [L_p != L_q]
//! ```
//!
//! as an s-t graph, and takes the minimum cut. Foreground is the source
//! side. Definite trimap pixels are pinned with capacity [`HARD_CAPACITY`].

mod gmm;
mod maxflow;
mod recist;

pub use gmm::{fit_gmm, fit_gmm_traced, gmm_neg_log_likelihood, refine_gmm, GmmModel, VARIANCE_FLOOR};
pub use maxflow::{max_flow_min_cut, FlowGraph, MinCut};
pub use recist::{trimap_from_recist, Point, RecistAnnotation, Segment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid, Trimap, TrimapLabel};
use crate::rng::SeededRng;

/// Finite stand-in for an infinite terminal capacity.
pub const HARD_CAPACITY: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Neighborhood {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Neighborhood {
    /// Forward offsets (dx, dy) so each unordered pair is visited once.
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(1, 0), (0, 1)],
            Neighborhood::Eight => &[(1, 0), (0, 1), (1, 1), (-1, 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrabcutConfig {
    pub gmm_components: usize,
    pub iterations: usize,
    pub em_iterations: usize,
    /// Smoothness weight (gamma).
    pub gamma: f64,
    /// Scale applied to the RECIST quadrilateral for definite foreground.
    pub fg_seed_shrink: f64,
    /// Growth of the endpoint bounding box before definite background, in pixels.
    pub bbox_expand: f64,
    pub neighborhood: Neighborhood,
    /// Maximum gap, in pixels, allowed between the two diameters.
    pub cross_tolerance: f64,
}

impl Default for GrabcutConfig {
    fn default() -> Self {
        Self {
            gmm_components: 5,
            iterations: 5,
            em_iterations: 10,
            gamma: 50.0,
            fg_seed_shrink: 0.8,
            bbox_expand: 20.0,
            neighborhood: Neighborhood::Eight,
            cross_tolerance: 2.0,
        }
    }
}

impl GrabcutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gmm_components == 0 || self.iterations == 0 {
            return Err(Error::Config("gmm_components and iterations must be positive".into()));
        }
        if !(self.gamma > 0.0) || !(self.bbox_expand > 0.0) || !(self.cross_tolerance >= 0.0) {
            return Err(Error::Config("gamma and bbox_expand must be positive".into()));
        }
        if !(self.fg_seed_shrink > 0.0 && self.fg_seed_shrink <= 1.0) {
            return Err(Error::Config(format!("fg_seed_shrink must lie in (0, 1], got {}", self.fg_seed_shrink)));
        }
        Ok(())
    }
}

/// Contrast-sensitive pairwise weights shared by the graph and the energy.
#[derive(Debug, Clone)]
pub struct Smoothness {
    pub beta: f64,
    /// (p, q, weight) for every unordered neighbor pair.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl Smoothness {
    pub fn new(img: &ImageGrid, gamma: f64, neighborhood: Neighborhood) -> Self {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let mut raw = Vec::new();
        let mut sum_sq = 0.0;
        for y in 0..h {
            for x in 0..w {
                for &(dx, dy) in neighborhood.offsets() {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let d = img.get(x as usize, y as usize) - img.get(nx as usize, ny as usize);
                    sum_sq += d * d;
                    let dist = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                    raw.push(((y * w + x) as usize, (ny * w + nx) as usize, d * d, dist));
                }
            }
        }
        // uniform image: beta undefined -> pure Potts
        let beta = if sum_sq > 0.0 { 1.0 / (2.0 * sum_sq / raw.len() as f64) } else { 0.0 };
        let pairs = raw
            .into_iter()
            .map(|(p, q, d2, dist)| (p, q, gamma * (-beta * d2).exp() / dist))
            .collect();
        Self { beta, pairs }
    }
}

fn check_dims(img: &ImageGrid, trimap: &Trimap) -> Result<()> {
    if img.width() != trimap.width() || img.height() != trimap.height() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs trimap {}x{}",
            img.width(),
            img.height(),
            trimap.width(),
            trimap.height()
        )));
    }
    Ok(())
}

/// Builds the s-t graph for one GrabCut cut.
///
/// Probable pixels get terminal capacities `NLL_bg - m` (source) and
/// `NLL_fg - m` (sink), with `m = min(NLL_fg, NLL_bg)` subtracted so both are
/// non-negative; the shift is constant per pixel and does not move the
/// minimum. Definite foreground gets `(HARD_CAPACITY, 0)`, definite
/// background `(0, HARD_CAPACITY)`.
pub fn build_graph(img: &ImageGrid, trimap: &Trimap, fg: &GmmModel, bg: &GmmModel, cfg: &GrabcutConfig) -> Result<FlowGraph> {
    check_dims(img, trimap)?;
    let smooth = Smoothness::new(img, cfg.gamma, cfg.neighborhood);
    Ok(graph_with_smoothness(img, trimap, fg, bg, &smooth))
}

fn graph_with_smoothness(img: &ImageGrid, trimap: &Trimap, fg: &GmmModel, bg: &GmmModel, smooth: &Smoothness) -> FlowGraph {
    let n = img.data().len();
    let mut g = FlowGraph::new(n);
    for (p, (&v, &label)) in img.data().iter().zip(trimap.labels()).enumerate() {
        let (src, snk) = match label {
            TrimapLabel::DefiniteFg => (HARD_CAPACITY, 0.0),
            TrimapLabel::DefiniteBg => (0.0, HARD_CAPACITY),
            _ => {
                let dfg = fg.neg_log_likelihood(v);
                let dbg = bg.neg_log_likelihood(v);
                let m = dfg.min(dbg);
                (dbg - m, dfg - m)
            }
        };
        g.source_caps[p] = src;
        g.sink_caps[p] = snk;
    }
    g.edges = smooth.pairs.clone();
    g
}

/// GrabCut energy of a labeling; `INFINITY` when it flips a definite pixel.
pub fn energy(img: &ImageGrid, trimap: &Trimap, labeling: &BinaryMask, fg: &GmmModel, bg: &GmmModel, smooth: &Smoothness) -> f64 {
    let labels = labeling.labels();
    let mut e = 0.0;
    for (p, (&v, &t)) in img.data().iter().zip(trimap.labels()).enumerate() {
        let on = labels[p] == 1;
        if (t == TrimapLabel::DefiniteFg && !on) || (t == TrimapLabel::DefiniteBg && on) {
            return f64::INFINITY;
        }
        e += if on { fg.neg_log_likelihood(v) } else { bg.neg_log_likelihood(v) };
    }
    for &(p, q, wgt) in &smooth.pairs {
        if labels[p] != labels[q] {
            e += wgt;
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct GrabcutResult {
    pub mask: BinaryMask,
    /// Energy after each cut, under the mixtures used for that cut.
    pub energies: Vec<f64>,
    pub fg_model: GmmModel,
    pub bg_model: GmmModel,
}

/// Runs GrabCut and returns the final foreground mask.
pub fn grabcut(img: &ImageGrid, trimap: &Trimap, cfg: &GrabcutConfig, rng: &mut SeededRng) -> Result<BinaryMask> {
    Ok(grabcut_traced(img, trimap, cfg, rng)?.mask)
}

/// GrabCut with per-iteration energies and the final mixtures.
///
/// The first iteration seeds each mixture with k-means++ and EM; later
/// iterations warm-start EM from the previous mixture. A class with fewer
/// pixels than `gmm_components` uses one component per pixel.
pub fn grabcut_traced(img: &ImageGrid, trimap: &Trimap, cfg: &GrabcutConfig, rng: &mut SeededRng) -> Result<GrabcutResult> {
    cfg.validate()?;
    check_dims(img, trimap)?;
    let smooth = Smoothness::new(img, cfg.gamma, cfg.neighborhood);
    let mut mask = trimap.initial_mask();
    let mut models: Option<(GmmModel, GmmModel)> = None;
    let mut energies = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let (fg_samples, bg_samples) = split_samples(img, &mask);
        let (fg, bg) = match models.take() {
            None => {
                let kf = cfg.gmm_components.min(fg_samples.len());
                let kb = cfg.gmm_components.min(bg_samples.len());
                (
                    fit_gmm(&fg_samples, kf, cfg.em_iterations, rng)?,
                    fit_gmm(&bg_samples, kb, cfg.em_iterations, rng)?,
                )
            }
            Some((f, b)) => (
                refine_gmm(f, &fg_samples, cfg.em_iterations),
                refine_gmm(b, &bg_samples, cfg.em_iterations),
            ),
        };
        let graph = graph_with_smoothness(img, trimap, &fg, &bg, &smooth);
        let cut = max_flow_min_cut(&graph)?;
        mask = BinaryMask::new(img.width(), img.height(), cut.source_side.iter().map(|&s| s as u8).collect())?;
        energies.push(energy(img, trimap, &mask, &fg, &bg, &smooth));
        models = Some((fg, bg));
    }
    let (fg_model, bg_model) = models.expect("at least one iteration");
    Ok(GrabcutResult { mask, energies, fg_model, bg_model })
}

fn split_samples(img: &ImageGrid, mask: &BinaryMask) -> (Vec<f64>, Vec<f64>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&v, &l) in img.data().iter().zip(mask.labels()) {
        if l == 1 {
            fg.push(v);
        } else {
            bg.push(v);
        }
    }
    (fg, bg)
}
