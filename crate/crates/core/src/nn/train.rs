//! Training and inference loops.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cluster::LesionPair;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};
use crate::metrics;
use crate::nn::graph::Graph;
use crate::nn::model::CosegNet;
use crate::nn::params::{AdamConfig, AdamState};
use crate::nn::tensor::{mask_targets, Tensor};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Validation Dice is computed every this many iterations and after the last.
    pub eval_every: usize,
    /// Train each image independently without attention.
    pub single_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 2,
            iterations_per_epoch: 12_000,
            lr: 1e-5,
            weight_decay: 0.0005,
            eval_every: 500,
            single_branch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Preprocessed image with its (weak) training mask.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: ImageGrid,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Iteration whose parameters were kept (0 means the initial ones).
    pub best_iteration: usize,
    pub best_val_dice: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_loss,val_dice\n");
        for p in &self.curve {
            let v = p.val_dice.map(|v| format!("{v:.8}")).unwrap_or_default();
            s.push_str(&format!("{},{:.8},{}\n", p.iteration, p.train_loss, v));
        }
        s
    }
}

fn lookup<'a>(data: &'a HashMap<String, Example>, id: &str) -> Result<&'a Example> {
    data.get(id).ok_or_else(|| Error::IdMismatch(format!("no image/mask for lesion {id}")))
}

fn check_pairs(pairs: &[LesionPair], data: &HashMap<String, Example>) -> Result<()> {
    for p in pairs {
        lookup(data, &p.a)?;
        lookup(data, &p.b)?;
    }
    Ok(())
}

/// One optimization step on a batch of pairs; returns the loss.
fn step(net: &mut CosegNet, adam: &mut AdamState, batch: &[&LesionPair], data: &HashMap<String, Example>, single: bool) -> Result<f64> {
    let ea: Vec<&Example> = batch.iter().map(|p| lookup(data, &p.a)).collect::<Result<_>>()?;
    let eb: Vec<&Example> = batch.iter().map(|p| lookup(data, &p.b)).collect::<Result<_>>()?;
    let xa = Tensor::from_images(&ea.iter().map(|e| &e.image).collect::<Vec<_>>())?;
    let xb = Tensor::from_images(&eb.iter().map(|e| &e.image).collect::<Vec<_>>())?;
    let ta = mask_targets(&ea.iter().map(|e| &e.mask).collect::<Vec<_>>());
    let tb = mask_targets(&eb.iter().map(|e| &e.mask).collect::<Vec<_>>());
    let mut g = Graph::new();
    let (va, vb) = (g.input(xa), g.input(xb));
    let (la, lb) = if single {
        (net.forward_single(&mut g, va)?, net.forward_single(&mut g, vb)?)
    } else {
        net.forward_pair(&mut g, va, vb)?
    };
    let ca = g.cross_entropy(la, &ta)?;
    let cb = g.cross_entropy(lb, &tb)?;
    let sum = g.add(ca, cb)?;
    let loss = g.scale(sum, 0.5);
    g.backward(loss)?;
    let store = net.params_mut();
    store.zero_grads();
    g.accumulate_param_grads(store)?;
    adam.step(store);
    Ok(g.value(loss).item())
}

/// Foreground probability maps for every pair, in order.
pub fn infer_pairs(net: &CosegNet, pairs: &[LesionPair], data: &HashMap<String, Example>, single: bool, batch_size: usize) -> Result<Vec<(ImageGrid, ImageGrid)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let ea: Vec<&ImageGrid> = chunk.iter().map(|p| lookup(data, &p.a).map(|e| &e.image)).collect::<Result<_>>()?;
        let eb: Vec<&ImageGrid> = chunk.iter().map(|p| lookup(data, &p.b).map(|e| &e.image)).collect::<Result<_>>()?;
        let (xa, xb) = (Tensor::from_images(&ea)?, Tensor::from_images(&eb)?);
        let (pa, pb) = if single { (net.predict_single(&xa)?, net.predict_single(&xb)?) } else { net.predict_pair(&xa, &xb)? };
        for i in 0..chunk.len() {
            out.push((pa.channel_image(i, 0)?, pb.channel_image(i, 0)?));
        }
    }
    Ok(out)
}

/// Mask of pixels with foreground probability above one half.
pub fn threshold(prob: &ImageGrid) -> BinaryMask {
    BinaryMask::from_fn(prob.width(), prob.height(), |x, y| prob.get(x, y) > 0.5)
}

/// Mean Dice of thresholded predictions against each member's mask.
pub fn pair_dice(net: &CosegNet, pairs: &[LesionPair], data: &HashMap<String, Example>, single: bool, batch_size: usize) -> Result<f64> {
    let probs = infer_pairs(net, pairs, data, single, batch_size)?;
    let mut total = 0.0;
    for (p, (pa, pb)) in pairs.iter().zip(&probs) {
        total += metrics::dice(&threshold(pa), &lookup(data, &p.a)?.mask)?;
        total += metrics::dice(&threshold(pb), &lookup(data, &p.b)?.mask)?;
    }
    Ok(total / (2 * pairs.len()).max(1) as f64)
}

/// Trains `net` in place. Batches are drawn from a seeded permutation of
/// `pairs` that is reshuffled whenever it is exhausted. When `val_pairs` is
/// non-empty the parameters with the best validation Dice are kept.
pub fn train(
    net: &mut CosegNet,
    pairs: &[LesionPair],
    val_pairs: &[LesionPair],
    data: &HashMap<String, Example>,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    check_pairs(pairs, data)?;
    check_pairs(val_pairs, data)?;
    let total = cfg.total_iterations();
    let mut adam = AdamState::new(net.params(), cfg.adam());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(total);
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    for it in 1..=total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let loss = step(net, &mut adam, &batch, data, cfg.single_branch)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("training diverged at iteration {it}")));
        }
        let val_dice = if !val_pairs.is_empty() && (it % cfg.eval_every == 0 || it == total) {
            Some(pair_dice(net, val_pairs, data, cfg.single_branch, cfg.batch_size)?)
        } else {
            None
        };
        if let Some(d) = val_dice {
            if best.as_ref().map_or(true, |(b, _, _)| d > *b) {
                best = Some((d, it, net.params().entries()));
            }
        }
        curve.push(CurvePoint { iteration: it, train_loss: loss, val_dice });
    }
    let (best_iteration, best_val_dice) = match best {
        Some((d, it, entries)) => {
            net.params_mut().load(&entries)?;
            (it, Some(d))
        }
        None => (total, None),
    };
    Ok(TrainReport { curve, best_iteration, best_val_dice })
}
