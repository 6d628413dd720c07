//! Pixel-wise segmentation metrics and their aggregation.
//!
//! Empty masks: when both prediction and ground truth are empty, recall,
//! precision, Dice and VS are 1. When only one side is empty the undefined
//! ratio is scored 0. AVD is undefined if either side is empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if !pred.same_dims(gt) {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, other_err: u64) -> f64 {
    if den == 0 {
        if other_err == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_)
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn volumetric_similarity(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            1.0 - self.fn_.abs_diff(self.fp) as f64 / den as f64
        }
    }
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

/// How the two directed average distances are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AvdMode {
    #[default]
    Max,
    Mean,
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in 1..n {
        loop {
            let p = v[v.len() - 1];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
            } else {
                v.push(q);
                *z.last_mut().expect("nonempty") = s;
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest foreground pixel of `mask`.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    let mut d: Vec<f64> = mask.labels().iter().map(|&l| if l != 0 { 0.0 } else { FAR }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&d[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    d
}

fn directed(from: &BinaryMask, to_dt: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &l) in from.labels().iter().enumerate() {
        if l != 0 {
            sum += to_dt[i].sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

/// Averaged Hausdorff distance in pixels.
pub fn averaged_hausdorff(pred: &BinaryMask, gt: &BinaryMask, mode: AvdMode) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::DimensionMismatch("AVD masks differ in size".into()));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let d_ab = directed(pred, &squared_distance_transform(gt));
    let d_ba = directed(gt, &squared_distance_transform(pred));
    Ok(match mode {
        AvdMode::Max => d_ab.max(d_ba),
        AvdMode::Mean => 0.5 * (d_ab + d_ba),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
    pub avd: Option<f64>,
    pub vs: f64,
}

pub fn evaluate_case(id: &str, pred: &BinaryMask, gt: &BinaryMask, mode: AvdMode) -> Result<CaseMetrics> {
    let c = confusion(pred, gt)?;
    let avd = match averaged_hausdorff(pred, gt, mode) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        id: id.to_string(),
        recall: c.recall(),
        precision: c.precision(),
        dice: c.dice(),
        avd,
        vs: c.volumetric_similarity(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation, summed in input order.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Summary { mean, std: var.sqrt(), count: values.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub recall: Summary,
    pub precision: Summary,
    pub dice: Summary,
    /// `None` when every case lacked an AVD value.
    pub avd: Option<Summary>,
    pub avd_missing: usize,
    pub vs: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Aggregate,
}

pub fn aggregate(cases: Vec<CaseMetrics>) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Empty("no cases to aggregate".into()));
    }
    let col = |f: fn(&CaseMetrics) -> f64| summarize(&cases.iter().map(f).collect::<Vec<_>>()).expect("non-empty");
    let avds: Vec<f64> = cases.iter().filter_map(|c| c.avd).collect();
    let aggregate = Aggregate {
        recall: col(|c| c.recall),
        precision: col(|c| c.precision),
        dice: col(|c| c.dice),
        avd: summarize(&avds),
        avd_missing: cases.len() - avds.len(),
        vs: col(|c| c.vs),
    };
    Ok(EvalReport { cases, aggregate })
}

impl EvalReport {
    /// Fixed-width table of `mean ± std` per metric.
    pub fn table(&self, label: &str) -> String {
        let a = &self.aggregate;
        let fmt = |s: &Summary| format!("{:.3} ± {:.2}", s.mean, s.std);
        let avd = a.avd.as_ref().map_or_else(|| "n/a".to_string(), fmt);
        format!(
            "{:<16} {:>14} {:>14} {:>14} {:>14} {:>14}\n{:<16} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
            "Method",
            "Recall",
            "Precision",
            "Dice",
            "AVD",
            "VS",
            label,
            fmt(&a.recall),
            fmt(&a.precision),
            fmt(&a.dice),
            avd,
            fmt(&a.vs)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| on.contains(&(x, y)))
    }

    fn brute_avd(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let pa = a.foreground();
        let pb = b.foreground();
        let d = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            from.iter()
                .map(|&(x, y)| {
                    to.iter()
                        .map(|&(u, v)| ((x as f64 - u as f64).powi(2) + (y as f64 - v as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        d(&pa, &pb).max(d(&pb, &pa))
    }

    #[test]
    fn all_ones() {
        let m = BinaryMask::ones(4, 4);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 16, fp: 0, fn_: 0, tn: 0 });
        assert_eq!((c.recall(), c.precision(), c.dice(), c.volumetric_similarity()), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn complement() {
        let gt = mask(4, 4, &[(0, 0), (1, 1)]);
        let pred = BinaryMask::from_fn(4, 4, |x, y| !gt.get(x, y));
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!((c.recall(), c.precision(), c.dice()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn subset_example() {
        let gt = mask(4, 4, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        let pred = mask(4, 4, &[(0, 0), (1, 0)]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c.recall(), 0.5);
        assert_eq!(c.precision(), 1.0);
        assert!((c.dice() - 4.0 / 6.0).abs() < 1e-12);
        assert!((c.volumetric_similarity() - (1.0 - 2.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::zeros(3, 3);
        let c = confusion(&e, &e).unwrap();
        assert_eq!((c.recall(), c.precision(), c.dice(), c.volumetric_similarity()), (1.0, 1.0, 1.0, 1.0));
        assert!(matches!(averaged_hausdorff(&e, &e, AvdMode::Max), Err(Error::EmptyMask)));
        let one = mask(3, 3, &[(1, 1)]);
        let c = confusion(&e, &one).unwrap();
        assert_eq!((c.recall(), c.precision(), c.dice()), (0.0, 0.0, 0.0));
        let r = evaluate_case("x", &e, &one, AvdMode::Max).unwrap();
        assert_eq!(r.avd, None);
    }

    #[test]
    fn equal_area_disjoint_vs_is_one() {
        let a = mask(4, 4, &[(0, 0), (1, 0)]);
        let b = mask(4, 4, &[(3, 3), (2, 3)]);
        assert_eq!(confusion(&a, &b).unwrap().volumetric_similarity(), 1.0);
    }

    #[test]
    fn avd_examples() {
        let a = mask(8, 8, &[(1, 1)]);
        let b = mask(8, 8, &[(4, 1)]);
        assert_eq!(averaged_hausdorff(&a, &b, AvdMode::Max).unwrap(), 3.0);
        assert_eq!(averaged_hausdorff(&a, &a, AvdMode::Max).unwrap(), 0.0);
        assert!(confusion(&a, &BinaryMask::zeros(7, 8)).is_err());
    }

    #[test]
    fn avd_mean_mode() {
        let a = mask(8, 1, &[(0, 0)]);
        let b = mask(8, 1, &[(0, 0), (4, 0)]);
        // d(a,b) = 0, d(b,a) = 2
        assert_eq!(averaged_hausdorff(&a, &b, AvdMode::Max).unwrap(), 2.0);
        assert_eq!(averaged_hausdorff(&a, &b, AvdMode::Mean).unwrap(), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let case = |d: f64| CaseMetrics { id: "c".into(), recall: d, precision: d, dice: d, avd: None, vs: d };
        let r = aggregate(vec![case(0.8), case(0.9)]).unwrap();
        assert!((r.aggregate.dice.mean - 0.85).abs() < 1e-12);
        assert!((r.aggregate.dice.std - 0.05).abs() < 1e-12);
        assert_eq!(r.aggregate.avd, None);
        assert_eq!(r.aggregate.avd_missing, 2);
        let single = aggregate(vec![case(0.7)]).unwrap();
        assert_eq!((single.aggregate.dice.mean, single.aggregate.dice.std), (0.7, 0.0));
        assert!(aggregate(vec![]).is_err());
        assert!(r.table("coseg").contains("0.850 ± 0.05"));
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (proptest::collection::vec(0u8..2, w * h), proptest::collection::vec(0u8..2, w * h))
                .prop_map(move |(a, b)| (BinaryMask::new(w, h, a).unwrap(), BinaryMask::new(w, h, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn avd_matches_brute_force((a, b) in arb_pair()) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let got = averaged_hausdorff(&a, &b, AvdMode::Max).unwrap();
            prop_assert!((got - brute_avd(&a, &b)).abs() < 1e-9);
            prop_assert_eq!(averaged_hausdorff(&a, &a, AvdMode::Max).unwrap(), 0.0);
        }

        #[test]
        fn dice_is_harmonic_mean((a, b) in arb_pair()) {
            let c = confusion(&a, &b).unwrap();
            prop_assert_eq!(c.total() as usize, a.width() * a.height());
            let (p, r) = (c.precision(), c.recall());
            if c.tp > 0 {
                prop_assert!((c.dice() - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
            let vs = c.volumetric_similarity();
            prop_assert!((0.0..=1.0).contains(&vs));
        }

        #[test]
        fn translation_invariance((a, b) in arb_pair(), dx in 0usize..4, dy in 0usize..4) {
            let shift = |m: &BinaryMask| BinaryMask::from_fn(m.width() + dx, m.height() + dy, |x, y| {
                x >= dx && y >= dy && m.get(x - dx, y - dy)
            });
            let (sa, sb) = (shift(&a), shift(&b));
            let (c0, c1) = (confusion(&a, &b).unwrap(), confusion(&sa, &sb).unwrap());
            prop_assert_eq!((c0.tp, c0.fp, c0.fn_), (c1.tp, c1.fp, c1.fn_));
            if !a.is_empty() && !b.is_empty() {
                let d0 = averaged_hausdorff(&a, &b, AvdMode::Max).unwrap();
                let d1 = averaged_hausdorff(&sa, &sb, AvdMode::Max).unwrap();
                prop_assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }
}
