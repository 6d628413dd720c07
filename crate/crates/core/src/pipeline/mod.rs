//! Batch driver: configuration, on-disk artifacts, manifests and the
//! commands that chain the stages together.
//!
//! Layout of the output directory:
//!
//! ```text
//! masks/<id>.png            GrabCut initial masks
//! features.csv              lesion_id,f0,...
//! clusters.csv              lesion_id,cluster
//! centroids.csv             cluster,c0,...
//! split.csv                 lesion_id,split
//! pairs.csv                 lesion_id_a,lesion_id_b,cluster,split
//! model.ckpt                network parameters
//! loss_curve.csv            iteration,train_loss,val_dice
//! train_summary.json
//! test_partners.csv         lesion_id,partner
//! prob/<id>.png             foreground probability (16-bit)
//! pred/<id>.png             thresholded network output
//! refined/<id>.png          CRF-refined masks
//! report_<source>.{csv,json}
//! report_table.txt
//! overlays/<id>.png         ground truth (green) | prediction (red)
//! manifests/<stage>.json
//! ```

pub mod artifacts;
mod commands;
pub mod config;
pub mod lesion;
pub mod manifest;
pub mod overlay;

pub use commands::{evaluate_dirs, refine_lesion, report_csv, split_tags, Dataset, Evaluation, Pipeline, Stage, StageOutcome, Status};
pub use config::{ClusteringConfig, EvaluateConfig, FeatureMode, Pairing, Paths, PipelineConfig, PreprocessConfig, RefineConfig, CONFIG_VERSION};
pub use lesion::{lesion_features, network_example, predict, test_partners, unmap, weak_mask, Roi};
pub use manifest::Manifest;
