//! Triplet-loss metric learning with KNN classification and open-set
//! (new-class) detection.
//!
//! The pipeline: [`data`] loads and splits a dataset, [`trainer`] fits an
//! embedding [`network`] with online [`triplet`] mining, [`space`] stores the
//! embedded training set and classifies queries by nearest neighbours,
//! [`openset`] flags queries that belong to none of the known classes, and
//! [`metrics`] scores the result.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pick `f64`, with `*32` variants for `f32`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod openset;
pub mod scalar;
pub mod space;
pub mod trainer;
pub mod triplet;
pub mod util;

pub use data::{Dataset, FeatureShape, Label, LabeledSample, SplitTag};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use metrics::{ConfusionMatrix, EvalReport};
pub use network::{Architecture, Checkpoint, LayerSpec, NetworkParams, OptimizerConfig};
pub use openset::{OpenSetConfig, OpenSetMethod, ThresholdSweep};
pub use scalar::Scalar;
pub use space::{ClassificationResult, EmbeddingSpace, Provenance};
pub use trainer::{TrainConfig, TrainHistory};
pub use triplet::{MiningReport, MiningStrategy};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Network = NetworkParams<f64>;
pub type Network32 = NetworkParams<f32>;
pub type Gallery = EmbeddingSpace<f64>;
pub type Gallery32 = EmbeddingSpace<f32>;
pub type Embeddings = Matrix<f64>;
pub type Embeddings32 = Matrix<f32>;
