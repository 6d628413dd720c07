//! One-dimensional Gaussian mixtures over pixel intensities.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Lower bound applied to every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    fn component_log_density(&self, k: usize, x: f64) -> f64 {
        let d = x - self.means[k];
        -0.5 * (LN_2PI + self.variances[k].ln() + d * d / self.variances[k])
    }

    /// `-log sum_k w_k N(x; mu_k, var_k)`, evaluated with log-sum-exp.
    pub fn neg_log_likelihood(&self, x: f64) -> f64 {
        let mut terms = [0.0f64; 16];
        let mut buf;
        let logs: &mut [f64] = if self.components() <= terms.len() {
            &mut terms[..self.components()]
        } else {
            buf = vec![0.0; self.components()];
            &mut buf
        };
        let mut best = f64::NEG_INFINITY;
        for (k, slot) in logs.iter_mut().enumerate() {
            *slot = if self.weights[k] > 0.0 {
                self.weights[k].ln() + self.component_log_density(k, x)
            } else {
                f64::NEG_INFINITY
            };
            best = best.max(*slot);
        }
        let s: f64 = logs.iter().map(|l| (l - best).exp()).sum();
        -(best + s.ln())
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        -samples.iter().map(|&x| self.neg_log_likelihood(x)).sum::<f64>()
    }
}

/// Free-function form of [`GmmModel::neg_log_likelihood`].
pub fn gmm_neg_log_likelihood(model: &GmmModel, x: f64) -> f64 {
    model.neg_log_likelihood(x)
}

/// EM fit from a k-means++-style seeding.
pub fn fit_gmm(samples: &[f64], k: usize, em_iterations: usize, rng: &mut SeededRng) -> Result<GmmModel> {
    Ok(fit_gmm_traced(samples, k, em_iterations, rng)?.0)
}

/// Like [`fit_gmm`], also returning the log-likelihood after seeding and
/// after each EM step.
pub fn fit_gmm_traced(
    samples: &[f64],
    k: usize,
    em_iterations: usize,
    rng: &mut SeededRng,
) -> Result<(GmmModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("GMM needs at least one component".into()));
    }
    if samples.len() < k {
        return Err(Error::InsufficientSamples { needed: k, got: samples.len() });
    }
    let model = seed_components(samples, k, rng);
    Ok(refine_gmm_traced(model, samples, em_iterations))
}

/// Warm-started EM from an existing model. Every step is monotone in the
/// sample log-likelihood, so refits across GrabCut iterations never raise
/// the data energy of the labeling they were fitted on.
pub fn refine_gmm(model: GmmModel, samples: &[f64], em_iterations: usize) -> GmmModel {
    refine_gmm_traced(model, samples, em_iterations).0
}

fn refine_gmm_traced(mut model: GmmModel, samples: &[f64], em_iterations: usize) -> (GmmModel, Vec<f64>) {
    let mut trace = vec![model.log_likelihood(samples)];
    for _ in 0..em_iterations {
        em_step(&mut model, samples);
        trace.push(model.log_likelihood(samples));
    }
    (model, trace)
}

fn seed_components(samples: &[f64], k: usize, rng: &mut SeededRng) -> GmmModel {
    let mut centers = vec![samples[rng.below(samples.len())]];
    let mut d2: Vec<f64> = samples.iter().map(|&x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.below(samples.len())
        };
        let c = samples[idx];
        centers.push(c);
        for (d, &x) in d2.iter_mut().zip(samples) {
            *d = d.min((x - c).powi(2));
        }
    }

    // hard assignment to nearest seed gives the starting parameters
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut count = vec![0usize; k];
    for &x in samples {
        let j = nearest(&centers, x);
        sum[j] += x;
        sq[j] += x * x;
        count[j] += 1;
    }
    let n = samples.len() as f64;
    let mut model = GmmModel { weights: vec![0.0; k], means: centers.clone(), variances: vec![VARIANCE_FLOOR; k] };
    for j in 0..k {
        if count[j] > 0 {
            let c = count[j] as f64;
            let mean = sum[j] / c;
            model.weights[j] = c / n;
            model.means[j] = mean;
            model.variances[j] = (sq[j] / c - mean * mean).max(VARIANCE_FLOOR);
        }
    }
    model
}

fn nearest(centers: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (j, &c) in centers.iter().enumerate() {
        if (x - c).abs() < (x - centers[best]).abs() {
            best = j;
        }
    }
    best
}

fn em_step(model: &mut GmmModel, samples: &[f64]) {
    let k = model.components();
    let mut resp_sum = vec![0.0; k];
    let mut resp_x = vec![0.0; k];
    let mut logs = vec![0.0; k];
    let mut resp: Vec<f64> = Vec::with_capacity(samples.len() * k);
    for &x in samples {
        let mut best = f64::NEG_INFINITY;
        for j in 0..k {
            logs[j] = if model.weights[j] > 0.0 {
                model.weights[j].ln() + model.component_log_density(j, x)
            } else {
                f64::NEG_INFINITY
            };
            best = best.max(logs[j]);
        }
        let norm: f64 = logs.iter().map(|l| (l - best).exp()).sum();
        for j in 0..k {
            let r = (logs[j] - best).exp() / norm;
            resp.push(r);
            resp_sum[j] += r;
            resp_x[j] += r * x;
        }
    }
    let mut means = model.means.clone();
    for j in 0..k {
        if resp_sum[j] > 0.0 {
            means[j] = resp_x[j] / resp_sum[j];
        }
    }
    let mut resp_sq = vec![0.0; k];
    for (i, &x) in samples.iter().enumerate() {
        for j in 0..k {
            let d = x - means[j];
            resp_sq[j] += resp[i * k + j] * d * d;
        }
    }
    let n = samples.len() as f64;
    for j in 0..k {
        if resp_sum[j] > 0.0 {
            model.weights[j] = resp_sum[j] / n;
            model.means[j] = means[j];
            model.variances[j] = (resp_sq[j] / resp_sum[j]).max(VARIANCE_FLOOR);
        } else {
            model.weights[j] = 0.0;
        }
    }
}
