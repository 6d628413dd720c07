//! From-scratch network operators, the co-segmentation model and its
//! training loop. Everything runs in f64 on the CPU.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use graph::{Graph, Var};
pub use kernels::ConvGeom;
pub use model::{foreground_prob, AttentionKind, CosegNet, EncoderVariant, Encoded, NetConfig};
pub use params::{AdamConfig, AdamState, Init, ParamStore};
pub use tensor::Tensor;
pub use train::{infer_pairs, pair_dice, threshold, train, CurvePoint, Example, TrainConfig, TrainReport};
