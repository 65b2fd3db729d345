//! A small feed-forward embedding network with hand-written backpropagation.
//!
//! The layer vocabulary is fixed: 3×3 same-padded convolution, ReLU, 2×2 max
//! pooling, flatten, dense and a final L2 normalization. Backward passes are
//! exact; `tests/gradient_check.rs` compares them against central differences.

mod checkpoint;
mod layers;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureShape;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use checkpoint::Checkpoint;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 kernel, stride 1, zero padding 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// 2×2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    L2Norm,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Volume { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Volume { c, h, w } => c * h * w,
            ActShape::Vector(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<FeatureShape> for ActShape {
    fn from(s: FeatureShape) -> Self {
        match s {
            FeatureShape::Image { channels, height, width } => ActShape::Volume { c: channels, h: height, w: width },
            FeatureShape::Flat(d) => ActShape::Vector(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

impl Architecture {
    pub const DEFAULT_EMBEDDING_DIM: usize = 128;

    pub fn new(input: FeatureShape, layers: Vec<LayerSpec>, embedding_dim: usize) -> Result<Self> {
        let arch = Self { input, layers, embedding_dim };
        arch.shapes()?;
        Ok(arch)
    }

    /// Two conv/ReLU/pool stages (16 and 32 channels), a dense projection and
    /// optional L2 normalization.
    pub fn default_image(channels: usize, height: usize, width: usize, embedding_dim: usize, l2: bool) -> Result<Self> {
        let flat = 32 * (height / 2 / 2) * (width / 2 / 2);
        let mut layers = vec![
            LayerSpec::Conv2d { in_channels: channels, out_channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Conv2d { in_channels: 16, out_channels: 32 },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: flat, out_dim: embedding_dim },
        ];
        if l2 {
            layers.push(LayerSpec::L2Norm);
        }
        Self::new(FeatureShape::Image { channels, height, width }, layers, embedding_dim)
    }

    /// `dense(d→64) → relu → dense(64→embedding_dim)`, optionally normalized.
    pub fn default_tabular(dim: usize, embedding_dim: usize, l2: bool) -> Result<Self> {
        let mut layers = vec![
            LayerSpec::Dense { in_dim: dim, out_dim: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 64, out_dim: embedding_dim },
        ];
        if l2 {
            layers.push(LayerSpec::L2Norm);
        }
        Self::new(FeatureShape::Flat(dim), layers, embedding_dim)
    }

    pub fn default_for(shape: FeatureShape, embedding_dim: usize, l2: bool) -> Result<Self> {
        match shape {
            FeatureShape::Image { channels, height, width } => {
                Self::default_image(channels, height, width, embedding_dim, l2)
            }
            FeatureShape::Flat(d) => Self::default_tabular(d, embedding_dim, l2),
        }
    }

    pub fn ends_in_l2norm(&self) -> bool {
        self.layers.last() == Some(&LayerSpec::L2Norm)
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    /// Output shape after every layer. Layer numbers in errors are 1-based,
    /// with 0 standing for the input.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let err = |i: usize, reason: String| Error::Architecture { from: i, to: i + 1, reason };
        let mut cur = ActShape::from(self.input);
        if cur.is_empty() {
            return Err(err(0, format!("input shape {} is empty", self.input)));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (LayerSpec::Conv2d { in_channels, out_channels }, ActShape::Volume { c, h, w }) => {
                    if in_channels != c {
                        return Err(err(i, format!("conv expects {in_channels} input channels but receives {c}")));
                    }
                    if out_channels == 0 {
                        return Err(err(i, "conv with zero output channels".into()));
                    }
                    ActShape::Volume { c: out_channels, h, w }
                }
                (LayerSpec::MaxPool, ActShape::Volume { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(err(i, format!("max-pool needs at least 2x2, got {h}x{w}")));
                    }
                    ActShape::Volume { c, h: h / 2, w: w / 2 }
                }
                (LayerSpec::Conv2d { .. } | LayerSpec::MaxPool, ActShape::Vector(d)) => {
                    return Err(err(i, format!("spatial layer applied to a flat vector of length {d}")))
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Flatten, s) => ActShape::Vector(s.len()),
                (LayerSpec::Dense { in_dim, out_dim }, ActShape::Vector(d)) => {
                    if in_dim != d {
                        return Err(err(i, format!("dense expects {in_dim} inputs but receives {d}")));
                    }
                    if out_dim == 0 {
                        return Err(err(i, "dense with zero outputs".into()));
                    }
                    ActShape::Vector(out_dim)
                }
                (LayerSpec::Dense { .. }, ActShape::Volume { .. }) => {
                    return Err(err(i, "dense applied to a volume; insert flatten".into()))
                }
                (LayerSpec::L2Norm, s) => {
                    if i + 1 != self.layers.len() {
                        return Err(err(i, "l2norm must be the last layer".into()));
                    }
                    s
                }
            };
            out.push(cur);
        }
        match cur {
            ActShape::Vector(d) if d == self.embedding_dim => Ok(out),
            other => Err(Error::Architecture {
                from: self.layers.len(),
                to: self.layers.len() + 1,
                reason: format!("network produces {other:?}, expected a vector of length {}", self.embedding_dim),
            }),
        }
    }
}

/// Weights and biases of one layer; both empty for parameter-free layers.
///
/// Conv weights are laid out `[out][in][ky][kx]`, dense weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros_like(other: &Self) -> Self {
        Self { weights: vec![T::zero(); other.weights.len()], bias: vec![T::zero(); other.bias.len()] }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a = *a + b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + b;
        }
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(&self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub architecture: Architecture,
    pub seed: u64,
    pub layers: Vec<LayerParams<T>>,
}

/// Gradients with the same layout as [`NetworkParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        Self { layers: params.layers.iter().map(LayerParams::zeros_like).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }
}

/// Output of [`NetworkParams::forward`], consumed by [`NetworkParams::backward`].
///
/// Only the batch input is retained; backward recomputes per-sample
/// activations so memory stays flat for image-sized layers.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    fingerprint: u64,
    inputs: Matrix<T>,
    batch: usize,
    embedding_dim: usize,
}

/// Glorot-style uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Random initialization: weights uniform in ±`init_bound`, biases zero.
pub fn init_params<T: Scalar>(arch: &Architecture, seed: u64) -> Result<NetworkParams<T>> {
    arch.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.layers.len());
    for layer in &arch.layers {
        let (n_weights, n_bias, fan_in, fan_out) = match *layer {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                (out_channels * in_channels * 9, out_channels, in_channels * 9, out_channels * 9)
            }
            LayerSpec::Dense { in_dim, out_dim } => (out_dim * in_dim, out_dim, in_dim, out_dim),
            _ => (0, 0, 1, 1),
        };
        let b = init_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-b, b).expect("finite init bound");
        layers.push(LayerParams {
            weights: (0..n_weights).map(|_| T::lit(dist.sample(&mut rng))).collect(),
            bias: vec![T::zero(); n_bias],
        });
    }
    Ok(NetworkParams { architecture: arch.clone(), seed, layers })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<T: Scalar> NetworkParams<T> {
    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// FNV-1a over the parameter bit patterns; identifies which parameters
    /// produced a forward cache.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(FNV_PRIME);
        };
        mix(self.layers.len() as u64);
        for l in &self.layers {
            mix(l.weights.len() as u64);
            for v in l.values() {
                mix(v.as_f64().to_bits());
            }
        }
        h
    }

    fn check_batch(&self, batch: &Matrix<T>) -> Result<()> {
        let expected = self.architecture.input_len();
        if batch.cols() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("batch rows of length {expected} ({})", self.architecture.input),
                found: format!("rows of length {}", batch.cols()),
            });
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite("network input batch".into()));
        }
        Ok(())
    }

    /// Embeds every row of `batch`. Rows are independent; evaluation is
    /// parallel but the result does not depend on the thread count.
    pub fn embed(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_batch(batch)?;
        let dim = self.architecture.embedding_dim;
        let rows: Vec<Vec<T>> =
            (0..batch.rows()).into_par_iter().map(|i| layers::forward_sample(self, batch.row(i))).collect();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend(r);
        }
        Matrix::from_vec(batch.rows(), dim, data)
    }

    pub fn embed_one(&self, input: &[T]) -> Result<Vec<T>> {
        let m = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.embed(&m)?.into_vec())
    }

    pub fn forward(&self, batch: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let embeddings = self.embed(batch)?;
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            inputs: batch.clone(),
            batch: batch.rows(),
            embedding_dim: self.architecture.embedding_dim,
        };
        Ok((embeddings, cache))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to each output embedding.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_embeddings: &Matrix<T>) -> Result<ParamGrads<T>> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::Contract("forward cache was produced by different parameters".into()));
        }
        if grad_embeddings.rows() != cache.batch || grad_embeddings.cols() != cache.embedding_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} embedding gradient", cache.batch, cache.embedding_dim),
                found: format!("{}x{}", grad_embeddings.rows(), grad_embeddings.cols()),
            });
        }
        if !grad_embeddings.is_finite() {
            return Err(Error::NonFinite("embedding gradient".into()));
        }
        // Fixed chunking keeps the floating-point reduction order independent
        // of how many worker threads run.
        const CHUNKS: usize = 8;
        let n = cache.batch;
        let chunk = n.div_ceil(CHUNKS).max(1);
        let partial: Vec<ParamGrads<T>> = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut acc = ParamGrads::zeros_like(self);
                for i in c * chunk..((c + 1) * chunk).min(n) {
                    layers::backward_sample(self, cache.inputs.row(i), grad_embeddings.row(i), &mut acc);
                }
                acc
            })
            .collect();
        let mut total = ParamGrads::zeros_like(self);
        for p in &partial {
            for (t, l) in total.layers.iter_mut().zip(&p.layers) {
                t.add_assign(l);
            }
        }
        Ok(total)
    }
}
