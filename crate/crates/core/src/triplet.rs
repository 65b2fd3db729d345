//! Triplet loss over squared Euclidean distances with online batch-all and
//! batch-hard mining. Both miners return the exact gradient of their mean
//! loss with respect to every embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    BatchAll,
    BatchHard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningReport<T> {
    pub strategy: MiningStrategy,
    pub mean_loss: T,
    /// batch-all: number of (anchor, positive, negative) triplets;
    /// batch-hard: number of anchors with at least one positive and one negative.
    pub n_valid_triplets: usize,
    pub n_positive_loss_triplets: usize,
    pub margin: T,
    /// batch-hard only: per anchor, the selected (hardest positive, hardest
    /// negative) indices; `None` for anchors without both.
    pub hardest: Vec<Option<(usize, usize)>>,
}

/// `D[i][j] = ‖e_i − e_j‖²` via the Gram expansion, clamped at zero, with an
/// exact zero diagonal.
pub fn pairwise_sq_distances<T: Scalar>(embeddings: &Matrix<T>) -> Matrix<T> {
    let b = embeddings.rows();
    let norms: Vec<T> = embeddings.iter_rows().map(|r| dot(r, r)).collect();
    let mut d = Matrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let g = dot(embeddings.row(i), embeddings.row(j));
            let v = (norms[i] + norms[j] - T::lit(2.0) * g).max(T::zero());
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Hinge `max(0, d_ap − d_an + margin)` on non-negative distances.
pub fn triplet_loss<T: Scalar>(d_ap: T, d_an: T, margin: T) -> Result<T> {
    if !(d_ap >= T::zero()) || !(d_an >= T::zero()) {
        return Err(Error::Contract(format!("triplet distances must be non-negative, got d_ap={d_ap}, d_an={d_an}")));
    }
    Ok((d_ap - d_an + margin).max(T::zero()))
}

fn check_inputs<T: Scalar>(embeddings: &Matrix<T>, labels: &[usize], margin: T) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", embeddings.rows()),
            found: format!("{} labels", labels.len()),
        });
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("embeddings passed to triplet mining".into()));
    }
    if !(margin >= T::zero()) {
        return Err(Error::Contract(format!("margin must be non-negative, got {margin}")));
    }
    Ok(())
}

/// Turns per-pair loss coefficients `w[i][j] = ∂L/∂D[i][j]` into embedding
/// gradients, scaled by `scale`.
fn distance_coeffs_to_grad<T: Scalar>(embeddings: &Matrix<T>, coeff: &Matrix<T>, scale: T) -> Matrix<T> {
    let (b, n) = (embeddings.rows(), embeddings.cols());
    let mut grad = Matrix::zeros(b, n);
    let two = T::lit(2.0);
    for i in 0..b {
        for j in 0..b {
            let w = coeff[(i, j)];
            if w == T::zero() {
                continue;
            }
            for k in 0..n {
                let diff = two * w * scale * (embeddings[(i, k)] - embeddings[(j, k)]);
                grad[(i, k)] = grad[(i, k)] + diff;
                grad[(j, k)] = grad[(j, k)] - diff;
            }
        }
    }
    grad
}

/// Every valid triplet in the batch. The mean is taken over triplets with a
/// strictly positive loss (0 when there are none).
pub fn batch_all<T: Scalar>(
    embeddings: &Matrix<T>,
    labels: &[usize],
    margin: T,
) -> Result<(MiningReport<T>, Matrix<T>)> {
    check_inputs(embeddings, labels, margin)?;
    let b = labels.len();
    let d = pairwise_sq_distances(embeddings);
    let mut coeff = Matrix::zeros(b, b);
    let mut total = T::zero();
    let (mut n_valid, mut n_pos) = (0usize, 0usize);
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = d[(a, p)];
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                n_valid += 1;
                let l = d_ap - d[(a, n)] + margin;
                if l > T::zero() {
                    total = total + l;
                    n_pos += 1;
                    coeff[(a, p)] = coeff[(a, p)] + T::one();
                    coeff[(a, n)] = coeff[(a, n)] - T::one();
                }
            }
        }
    }
    if n_valid == 0 {
        return Err(Error::DegenerateBatch(
            "no valid triplets: need a class with two samples and a second class".into(),
        ));
    }
    let (mean, scale) = if n_pos > 0 {
        let inv = T::one() / T::from_usize_lossy(n_pos);
        (total * inv, inv)
    } else {
        (T::zero(), T::zero())
    };
    let grad = distance_coeffs_to_grad(embeddings, &coeff, scale);
    Ok((
        MiningReport {
            strategy: MiningStrategy::BatchAll,
            mean_loss: mean,
            n_valid_triplets: n_valid,
            n_positive_loss_triplets: n_pos,
            margin,
            hardest: Vec::new(),
        },
        grad,
    ))
}

/// Per anchor, the farthest positive and the nearest negative (lowest index on
/// ties). The mean is over anchors that have both.
pub fn batch_hard<T: Scalar>(
    embeddings: &Matrix<T>,
    labels: &[usize],
    margin: T,
) -> Result<(MiningReport<T>, Matrix<T>)> {
    check_inputs(embeddings, labels, margin)?;
    let b = labels.len();
    let d = pairwise_sq_distances(embeddings);
    let mut coeff = Matrix::zeros(b, b);
    let mut hardest = Vec::with_capacity(b);
    let mut total = T::zero();
    let (mut n_valid, mut n_pos) = (0usize, 0usize);
    for a in 0..b {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hp.is_none_or(|p| d[(a, j)] > d[(a, p)]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|n| d[(a, j)] < d[(a, n)]) {
                hn = Some(j);
            }
        }
        let pair = hp.zip(hn);
        hardest.push(pair);
        let Some((p, n)) = pair else { continue };
        n_valid += 1;
        let l = d[(a, p)] - d[(a, n)] + margin;
        if l > T::zero() {
            total = total + l;
            n_pos += 1;
            coeff[(a, p)] = coeff[(a, p)] + T::one();
            coeff[(a, n)] = coeff[(a, n)] - T::one();
        }
    }
    if n_valid == 0 {
        return Err(Error::DegenerateBatch("no anchor has both a positive and a negative".into()));
    }
    let inv = T::one() / T::from_usize_lossy(n_valid);
    let grad = distance_coeffs_to_grad(embeddings, &coeff, inv);
    Ok((
        MiningReport {
            strategy: MiningStrategy::BatchHard,
            mean_loss: total * inv,
            n_valid_triplets: n_valid,
            n_positive_loss_triplets: n_pos,
            margin,
            hardest,
        },
        grad,
    ))
}

pub fn mine<T: Scalar>(
    strategy: MiningStrategy,
    embeddings: &Matrix<T>,
    labels: &[usize],
    margin: T,
) -> Result<(MiningReport<T>, Matrix<T>)> {
    match strategy {
        MiningStrategy::BatchAll => batch_all(embeddings, labels, margin),
        MiningStrategy::BatchHard => batch_hard(embeddings, labels, margin),
    }
}
