//! Appearance clustering of lesions, cluster-stratified splits and
//! within-cluster pairing.

mod features;
mod kmeans;
mod split;

pub use features::{extract_feature, recist_window, standardize, LesionFeature, FEATURE_DIM, HISTOGRAM_BINS};
pub use kmeans::{kmeans, kmeans_restarts, kmeans_traced, ClusterModel};
pub use split::{allocate, make_pairs, make_random_pairs, stratified_split, DatasetSplit, LesionPair, PairSet, SplitTag};
