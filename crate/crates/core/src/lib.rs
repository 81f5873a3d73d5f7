//! Dynamic motion filters for self-supervised video representation learning.
//!
//! A small 3D-convolutional trunk predicts, for every frame of a clip, a
//! softmax-normalized `s×s` filter that maps the frame onto its successor.
//! The stacked filters form a motion representation which, together with the
//! trunk's pooled features, feeds a classifier. Training minimizes
//! `α·L_FP + β·L_cls`, or `L_FP` alone for unlabeled pretraining.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks and oracle comparisons).

pub mod conv;
pub mod data;
pub mod dynfilter;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use conv::Padding;
pub use data::{Dataset, GenSpec, VideoClip};
pub use dynfilter::DynamicFilterBank;
pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport};
pub use graph::{Graph, Var};
pub use losses::{HuberMode, LossConfig, Reduction};
pub use model::{forward, ForwardOptions, ModelParams, NetworkConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainMode};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
