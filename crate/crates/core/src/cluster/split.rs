use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn get(&self, tag: SplitTag) -> &[String] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    fn get_mut(&mut self, tag: SplitTag) -> &mut Vec<String> {
        match tag {
            SplitTag::Train => &mut self.train,
            SplitTag::Val => &mut self.val,
            SplitTag::Test => &mut self.test,
        }
    }

    pub fn tag_of(&self, id: &str) -> Option<SplitTag> {
        SplitTag::ALL.into_iter().find(|&t| self.get(t).iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest-remainder allocation of `n` items over `ratios`; ties in the
/// fractional part go to the earlier entry.
pub fn allocate(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-cluster seeded shuffle, then largest-remainder train/val/test counts.
pub fn stratified_split(model: &ClusterModel, ratios: [f64; 3], rng: &mut SeededRng) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut split = DatasetSplit::default();
    for mut members in model.members() {
        rng.shuffle(&mut members);
        let counts = allocate(members.len(), &ratios);
        let mut it = members.into_iter();
        for (tag, &c) in SplitTag::ALL.iter().zip(&counts) {
            split.get_mut(*tag).extend(it.by_ref().take(c));
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionPair {
    pub a: String,
    pub b: String,
    /// Shared cluster, or `None` for pairs drawn without regard to clusters.
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub split: SplitTag,
    pub pairs: Vec<LesionPair>,
}

/// All unordered within-cluster pairs of each split, optionally capped per
/// cluster by a seeded uniform sample. Returns one set per split in
/// train/val/test order.
pub fn make_pairs(split: &DatasetSplit, model: &ClusterModel, cap_per_cluster: Option<usize>, rng: &mut SeededRng) -> Result<Vec<PairSet>> {
    let cluster_of: HashMap<&str, usize> = model.ids.iter().map(String::as_str).zip(model.labels.iter().copied()).collect();
    let mut out = Vec::with_capacity(3);
    for tag in SplitTag::ALL {
        let mut by_cluster: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for id in split.get(tag) {
            let c = *cluster_of
                .get(id.as_str())
                .ok_or_else(|| Error::IdMismatch(format!("lesion {id} is in the split but has no cluster")))?;
            by_cluster.entry(c).or_default().push(id);
        }
        let mut pairs = Vec::new();
        for (c, mut members) in by_cluster {
            members.sort_unstable();
            let mut all = Vec::new();
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    all.push((i, j));
                }
            }
            if let Some(cap) = cap_per_cluster {
                if all.len() > cap {
                    // partial Fisher-Yates, then restore lexicographic order
                    for i in 0..cap {
                        let j = i + rng.below(all.len() - i);
                        all.swap(i, j);
                    }
                    all.truncate(cap);
                    all.sort_unstable();
                }
            }
            pairs.extend(all.into_iter().map(|(i, j)| LesionPair {
                a: members[i].to_string(),
                b: members[j].to_string(),
                cluster: Some(c),
            }));
        }
        out.push(PairSet { split: tag, pairs });
    }
    Ok(out)
}

/// Pairs drawn uniformly within each split, ignoring clusters; `counts`
/// gives the number of pairs per split (train/val/test). Used for the
/// no-clustering ablation.
pub fn make_random_pairs(split: &DatasetSplit, counts: [usize; 3], rng: &mut SeededRng) -> Vec<PairSet> {
    SplitTag::ALL
        .iter()
        .zip(counts)
        .map(|(&tag, count)| {
            let mut members: Vec<&String> = split.get(tag).iter().collect();
            members.sort_unstable();
            let n = members.len();
            let total = n * n.saturating_sub(1) / 2;
            let mut pairs = Vec::with_capacity(count.min(total));
            if n >= 2 {
                let mut seen = std::collections::HashSet::new();
                while pairs.len() < count.min(total) {
                    let i = rng.below(n);
                    let j = rng.below(n);
                    let (i, j) = (i.min(j), i.max(j));
                    if i != j && seen.insert((i, j)) {
                        pairs.push(LesionPair { a: members[i].clone(), b: members[j].clone(), cluster: None });
                    }
                }
            }
            PairSet { split: tag, pairs }
        })
        .collect()
}
