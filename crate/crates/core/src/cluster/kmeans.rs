use crate::cluster::LesionFeature;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Lesion ids in input order, aligned with `labels`.
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.labels[i])
    }

    /// Member ids per cluster, in input order.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.k];
        for (id, &l) in self.ids.iter().zip(&self.labels) {
            out[l].push(id.clone());
        }
        out
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(features: &[LesionFeature], k: usize, iters: usize, rng: &mut SeededRng) -> Result<ClusterModel> {
    Ok(kmeans_traced(features, k, iters, rng)?.0)
}

/// Best of `restarts` independent [`kmeans`] runs by final inertia; the
/// earliest run wins ties.
pub fn kmeans_restarts(features: &[LesionFeature], k: usize, iters: usize, restarts: usize, rng: &mut SeededRng) -> Result<ClusterModel> {
    let mut best = kmeans(features, k, iters, rng)?;
    for _ in 1..restarts {
        let m = kmeans(features, k, iters, rng)?;
        if m.inertia < best.inertia {
            best = m;
        }
    }
    Ok(best)
}

/// Like [`kmeans`], also returning the inertia after seeding and after every
/// Lloyd iteration.
///
/// An iteration assigns each point to its nearest centroid (lowest index on
/// ties), moves centroids to member means, then re-seeds any empty cluster
/// at the point farthest from its centroid. Iteration stops early once the
/// assignment is stable.
pub fn kmeans_traced(
    features: &[LesionFeature],
    k: usize,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<(ClusterModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if features.len() < k {
        return Err(Error::InsufficientSamples { needed: k, got: features.len() });
    }
    let d = features[0].vector.len();
    if let Some(f) = features.iter().find(|f| f.vector.len() != d || f.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument(format!("feature {} has wrong dimension or non-finite entries", f.lesion_id)));
    }
    let points: Vec<&[f64]> = features.iter().map(|f| f.vector.as_slice()).collect();
    let n = points.len();

    let mut centroids = plus_plus_seeds(&points, k, rng);
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0; n];
    for i in 0..n {
        let (j, dd) = nearest(&centroids, points[i]);
        labels[i] = j;
        dist[i] = dd;
    }
    let mut trace = vec![dist.iter().sum::<f64>()];

    for it in 0..iters {
        if it > 0 {
            let mut changed = false;
            for i in 0..n {
                let (j, dd) = nearest(&centroids, points[i]);
                changed |= j != labels[i];
                labels[i] = j;
                dist[i] = dd;
            }
            if !changed {
                break;
            }
        }
        // update step
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(points[i]) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        for i in 0..n {
            dist[i] = sq_dist(&centroids[labels[i]], points[i]);
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // farthest point among those not alone in their cluster
            let mut far = None;
            for i in 0..n {
                if counts[labels[i]] > 1 && far.map_or(true, |f: usize| dist[i] > dist[f]) {
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                centroids[j] = points[i].to_vec();
                labels[i] = j;
                counts[j] = 1;
                dist[i] = 0.0;
            }
        }
        trace.push(dist.iter().sum());
    }

    let inertia = (0..n).map(|i| sq_dist(&centroids[labels[i]], points[i])).sum();
    let model = ClusterModel {
        k,
        centroids,
        ids: features.iter().map(|f| f.lesion_id.clone()).collect(),
        labels,
        inertia,
    };
    Ok((model, trace))
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // all remaining points coincide with a seed; take any unused index
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(idx);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[idx]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}
