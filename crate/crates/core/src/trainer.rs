//! PK batch sampling and the training loop with validation-loss model
//! selection.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{init_params, Architecture, NetworkParams, OptimizerConfig, OptimizerState};
use crate::scalar::Scalar;
use crate::triplet::{self, MiningStrategy, DEFAULT_MARGIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// P: distinct classes per batch.
    pub classes_per_batch: usize,
    /// K: samples drawn per class.
    pub samples_per_class: usize,
    pub margin: f64,
    pub strategy: MiningStrategy,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    pub l2_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            classes_per_batch: 32,
            samples_per_class: 4,
            margin: DEFAULT_MARGIN,
            strategy: MiningStrategy::BatchAll,
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            seed: 0,
            embedding_dim: Architecture::DEFAULT_EMBEDDING_DIM,
            l2_normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (p, k) = (self.classes_per_batch, self.samples_per_class);
        if p < 2 || k < 2 {
            return Err(Error::Config(format!(
                "classes_per_batch ({p}) and samples_per_class ({k}) must both be at least 2"
            )));
        }
        if p * k != self.batch_size {
            return Err(Error::Config(format!(
                "classes_per_batch × samples_per_class = {} but batch_size = {}",
                p * k,
                self.batch_size
            )));
        }
        if !(self.margin >= 0.0) || !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("margin must be ≥ 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss; 0 when no epoch ran.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// 1-based index of the first minimum, or `None` for an empty slice.
    pub fn select_best(val_losses: &[f64]) -> Option<usize> {
        val_losses
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                Some((_, b)) if v >= b => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i + 1)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?).map(|e| e.val_loss)
    }

    /// `epoch,train_loss,val_loss,seconds`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds);
        }
        out
    }
}

/// Indices into the training set plus their class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

fn known_labels<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<usize>> {
    ds.samples
        .iter()
        .map(|s| {
            s.label.known().ok_or_else(|| {
                Error::InvalidInput(format!("sample `{}` is labeled Novel; training needs known classes", s.source_id))
            })
        })
        .collect()
}

/// Draws P classes uniformly without replacement, then K samples from each:
/// without replacement when the class has at least K samples, otherwise with.
pub fn sample_pk_batch<T: Scalar, R: Rng + ?Sized>(
    train: &Dataset<T>,
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: &mut R,
) -> Result<PkBatch> {
    let groups: Vec<(usize, Vec<usize>)> =
        train.indices_by_label().into_iter().filter_map(|(l, idx)| l.known().map(|c| (c, idx))).collect();
    if groups.len() < classes_per_batch {
        return Err(Error::Config(format!(
            "batch needs {classes_per_batch} classes but the training set has {}",
            groups.len()
        )));
    }
    let mut chosen = index::sample(rng, groups.len(), classes_per_batch).into_vec();
    chosen.sort_unstable();
    let mut batch = PkBatch {
        indices: Vec::with_capacity(classes_per_batch * samples_per_class),
        labels: Vec::with_capacity(classes_per_batch * samples_per_class),
    };
    for g in chosen {
        let (class, members) = &groups[g];
        if members.len() >= samples_per_class {
            for j in index::sample(rng, members.len(), samples_per_class) {
                batch.indices.push(members[j]);
            }
        } else {
            for _ in 0..samples_per_class {
                batch.indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        batch.labels.extend(std::iter::repeat_n(*class, samples_per_class));
    }
    Ok(batch)
}

pub(crate) fn feature_matrix<T: Scalar>(ds: &Dataset<T>) -> Result<Matrix<T>> {
    let rows: Vec<&[T]> = ds.samples.iter().map(|s| s.features.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn gather<T: Scalar>(m: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data).expect("gathered rows match width")
}

/// Mean triplet loss of the whole dataset, mined as a single batch.
pub fn dataset_loss<T: Scalar>(
    params: &NetworkParams<T>,
    ds: &Dataset<T>,
    strategy: MiningStrategy,
    margin: f64,
) -> Result<f64> {
    let labels = known_labels(ds)?;
    let emb = params.embed(&feature_matrix(ds)?)?;
    let (report, _) = triplet::mine(strategy, &emb, &labels, T::lit(margin))?;
    Ok(report.mean_loss.as_f64())
}

/// Trains the default architecture for the data's sample shape.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset<T>,
    validation: &Dataset<T>,
) -> Result<(NetworkParams<T>, TrainHistory)> {
    config.validate()?;
    let shape = train_set.uniform_shape()?.ok_or_else(|| Error::EmptyInput("training set".into()))?;
    let arch = Architecture::default_for(shape, config.embedding_dim, config.l2_normalize)?;
    let params = init_params(&arch, config.seed)?;
    train_from(config, params, train_set, validation)
}

/// Runs the epoch loop from the given initial parameters and returns the
/// parameters of the epoch with the lowest validation loss.
pub fn train_from<T: Scalar>(
    config: &TrainConfig,
    mut params: NetworkParams<T>,
    train_set: &Dataset<T>,
    validation: &Dataset<T>,
) -> Result<(NetworkParams<T>, TrainHistory)> {
    config.validate()?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation set".into()));
    }
    let features = feature_matrix(train_set)?;
    let val_features = feature_matrix(validation)?;
    let val_labels = known_labels(validation)?;
    known_labels(train_set)?;
    let margin = T::lit(config.margin);

    // salt keeps batch sampling independent of the weight-init stream
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut opt = OptimizerState::new(config.optimizer, &params);
    let steps = train_set.len().div_ceil(config.batch_size).max(1);
    let mut best: Option<(f64, NetworkParams<T>)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for step in 1..=steps {
            let diverged = |reason: String| Error::Divergence { epoch, step, reason };
            let batch = sample_pk_batch(train_set, config.classes_per_batch, config.samples_per_class, &mut rng)?;
            let x = gather(&features, &batch.indices);
            let (emb, cache) = params.forward(&x)?;
            let (report, grad) = triplet::mine(config.strategy, &emb, &batch.labels, margin)?;
            let loss = report.mean_loss.as_f64();
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            let grads = params.backward(&cache, &grad)?;
            opt.step(&mut params, &grads).map_err(|e| match e {
                Error::Divergence { reason, .. } => diverged(reason),
                other => other,
            })?;
            loss_sum += loss;
        }
        let val_emb = params.embed(&val_features)?;
        let (val_report, _) = triplet::batch_all(&val_emb, &val_labels, margin)?;
        let val_loss = val_report.mean_loss.as_f64();
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, step: steps, reason: format!("validation loss is {val_loss}") });
        }
        log::info!(
            "epoch {epoch}/{}: train loss {:.5}, val loss {val_loss:.5}",
            config.epochs,
            loss_sum / steps as f64
        );
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gaussian_blobs;
    use crate::data::{FeatureShape, Label, LabeledSample, SplitTag};

    fn ds_with_counts(counts: &[usize]) -> Dataset<f64> {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(
                    LabeledSample::new(vec![i as f64], FeatureShape::Flat(1), Label::Known(c), format!("{c}-{i}"))
                        .unwrap(),
                );
            }
        }
        Dataset::new(samples, (0..counts.len()).map(|c| c.to_string()).collect(), SplitTag::Train).unwrap()
    }

    #[test]
    fn pk_batch_two_by_two() {
        let ds = ds_with_counts(&[5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(b.indices.len(), 4);
        let mut labels = b.labels.clone();
        labels.dedup();
        assert_eq!(labels.len(), 2);
        for (&i, &l) in b.indices.iter().zip(&b.labels) {
            assert_eq!(ds.samples[i].label, Label::Known(l));
        }
        // without replacement inside a class
        assert_ne!(b.indices[0], b.indices[1]);
    }

    #[test]
    fn pk_batch_with_replacement_fallback() {
        let ds = ds_with_counts(&[1, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&ds, 2, 4, &mut rng).unwrap();
        assert_eq!(&b.indices[..4], &[0, 0, 0, 0]);
    }

    #[test]
    fn pk_batch_default_size() {
        let ds = ds_with_counts(&[4; 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_pk_batch(&ds, 32, 4, &mut rng).unwrap();
        assert_eq!(b.indices.len(), 128);
        assert!(matches!(sample_pk_batch(&ds_with_counts(&[3, 3]), 3, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 100, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { classes_per_batch: 64, samples_per_class: 1, batch_size: 64, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn best_epoch_is_first_argmin() {
        assert_eq!(TrainHistory::select_best(&[0.5, 0.3, 0.4]), Some(2));
        assert_eq!(TrainHistory::select_best(&[0.5, 0.3, 0.3]), Some(2));
        assert_eq!(TrainHistory::select_best(&[]), None);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds: Dataset<f64> = gaussian_blobs(&[vec![0.0; 4], vec![3.0; 4]], 10, 0.3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            classes_per_batch: 2,
            samples_per_class: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (p, h) = train(&cfg, &ds, &ds).unwrap();
        let init: NetworkParams<f64> = init_params(&Architecture::default_tabular(4, 128, true).unwrap(), 0).unwrap();
        assert_eq!(p, init);
        assert!(h.epochs.is_empty());
        assert_eq!(h.best_epoch, 0);
    }

    #[test]
    fn returned_params_match_best_validation_loss() {
        let ds: Dataset<f64> =
            gaussian_blobs(&[vec![0.0; 4], vec![1.0; 4], vec![-1.0, 1.0, -1.0, 1.0]], 20, 0.6, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            classes_per_batch: 3,
            samples_per_class: 4,
            batch_size: 12,
            embedding_dim: 16,
            optimizer: OptimizerConfig::adam(1e-2),
            ..TrainConfig::default()
        };
        let (p, h) = train(&cfg, &ds, &ds).unwrap();
        let best = h.best_val_loss().unwrap();
        assert!(h.epochs.iter().all(|e| e.val_loss >= best));
        let recomputed = dataset_loss(&p, &ds, MiningStrategy::BatchAll, cfg.margin).unwrap();
        assert!((recomputed - best).abs() < 1e-12);
        assert_eq!(h.to_csv().lines().count(), 7);
    }
}
