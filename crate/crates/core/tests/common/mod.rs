//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written the slow, obvious way on purpose: direct loops,
//! no shared helpers from the library beyond plain data types.

#![allow(dead_code)]

use openset_core::network::NetworkParams;
use openset_core::triplet::{mine, MiningStrategy};
use openset_core::{Label, Matrix};
use rand::Rng;

pub fn sq_euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|a| rows.iter().map(|b| sq_euclid(a, b)).collect()).collect()
}

pub struct BatchAllOracle {
    pub mean_loss: f64,
    pub valid: usize,
    pub positive: usize,
}

/// Enumerates every (a, p, n) triple.
pub fn batch_all_oracle(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> BatchAllOracle {
    let d = dist_matrix(rows);
    let b = rows.len();
    let (mut sum, mut valid, mut positive) = (0.0, 0, 0);
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                valid += 1;
                let l = d[a][p] - d[a][n] + margin;
                if l > 0.0 {
                    sum += l;
                    positive += 1;
                }
            }
        }
    }
    BatchAllOracle { mean_loss: if positive == 0 { 0.0 } else { sum / positive as f64 }, valid, positive }
}

/// Per anchor: farthest positive and nearest negative, first index on ties.
pub fn batch_hard_oracle(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> (f64, Vec<Option<(usize, usize)>>) {
    let d = dist_matrix(rows);
    let b = rows.len();
    let mut picks = Vec::with_capacity(b);
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..b {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hp.is_none_or(|p| d[a][j] > d[a][p]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|n| d[a][j] < d[a][n]) {
                hn = Some(j);
            }
        }
        match (hp, hn) {
            (Some(p), Some(n)) => {
                sum += (d[a][p] - d[a][n] + margin).max(0.0);
                count += 1;
                picks.push(Some((p, n)));
            }
            _ => picks.push(None),
        }
    }
    (if count == 0 { 0.0 } else { sum / count as f64 }, picks)
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Random labels for `b` rows drawn from `classes` classes, guaranteed to
/// contain at least one valid triplet.
pub fn random_labels<R: Rng>(rng: &mut R, b: usize, classes: usize) -> Vec<usize> {
    loop {
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let mut counts = vec![0; classes];
        for &l in &labels {
            counts[l] += 1;
        }
        let populated = counts.iter().filter(|&&c| c > 0).count();
        if populated >= 2 && counts.iter().any(|&c| c >= 2) {
            return labels;
        }
    }
}

pub fn random_rows<R: Rng>(rng: &mut R, b: usize, n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..n).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

/// Mean mining loss of a batch pushed through the network.
pub fn network_loss(
    params: &NetworkParams<f64>,
    x: &Matrix<f64>,
    labels: &[usize],
    strategy: MiningStrategy,
    margin: f64,
) -> f64 {
    let emb = params.embed(x).unwrap();
    mine(strategy, &emb, labels, margin).unwrap().0.mean_loss
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the stencil straddles a ReLU / max-pool /
    /// hinge switch (see [`grad_check`]).
    pub kinks: usize,
}

/// Denominator floor so coordinates with (near-)zero gradient do not turn
/// round-off into huge relative errors.
pub const REL_FLOOR: f64 = 1e-8;

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences on up to `per_layer` randomly chosen weights and biases
/// of every parameterised layer.
///
/// The loss is only piecewise smooth. A coordinate counts as sitting on a
/// kink when the central differences at `h` and `h / 10` disagree by more
/// than `tol`: on a smooth piece both are O(h²)-accurate and agree far more
/// closely, while a wrong analytic gradient leaves them in agreement with
/// each other and is still caught.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<R: Rng>(
    rng: &mut R,
    params: &NetworkParams<f64>,
    x: &Matrix<f64>,
    labels: &[usize],
    strategy: MiningStrategy,
    margin: f64,
    h: f64,
    tol: f64,
    per_layer: usize,
) -> GradCheck {
    let (emb, cache) = params.forward(x).unwrap();
    let (_, g) = mine(strategy, &emb, labels, margin).unwrap();
    let analytic = params.backward(&cache, &g).unwrap();
    let central = |li: usize, is_bias: bool, i: usize, h: f64| {
        let mut plus = params.clone();
        let mut minus = params.clone();
        let (p, m) = if is_bias {
            (&mut plus.layers[li].bias[i], &mut minus.layers[li].bias[i])
        } else {
            (&mut plus.layers[li].weights[i], &mut minus.layers[li].weights[i])
        };
        *p += h;
        *m -= h;
        (network_loss(&plus, x, labels, strategy, margin) - network_loss(&minus, x, labels, strategy, margin))
            / (2.0 * h)
    };
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, kinks: 0 };
    for li in 0..params.layers.len() {
        for is_bias in [false, true] {
            let len = if is_bias { params.layers[li].bias.len() } else { params.layers[li].weights.len() };
            if len == 0 {
                continue;
            }
            for _ in 0..per_layer.min(len) {
                let i = rng.random_range(0..len);
                let numeric = central(li, is_bias, i, h);
                if rel_diff(numeric, central(li, is_bias, i, h / 10.0)) > tol {
                    out.kinks += 1;
                    continue;
                }
                let a = if is_bias { analytic.layers[li].bias[i] } else { analytic.layers[li].weights[i] };
                out.max_rel_error = out.max_rel_error.max(rel_diff(a, numeric));
                out.checked += 1;
            }
        }
    }
    out
}

/// Sorted (distance, index) pairs by brute force.
pub fn brute_neighbors(gallery: &[Vec<f64>], q: &[f64]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(i, g)| (sq_euclid(g, q).sqrt(), i)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v
}

/// Confusion counts by direct tally over (truth, prediction) keys.
pub fn tally_confusion(preds: &[Label], truths: &[Label], known: usize, open_set: bool) -> Vec<Vec<u64>> {
    let n = known + usize::from(open_set);
    let idx = |l: Label| match l {
        Label::Known(c) => c,
        Label::Novel => known,
    };
    let mut cm = vec![vec![0u64; n]; n];
    for (&p, &t) in preds.iter().zip(truths) {
        cm[idx(t)][idx(p)] += 1;
    }
    cm
}

/// (sensitivity, specificity) per class by counting samples directly.
pub fn tally_rates(preds: &[Label], truths: &[Label], classes: &[Label]) -> Vec<(Option<f64>, Option<f64>)> {
    classes
        .iter()
        .map(|&c| {
            let pos = truths.iter().filter(|&&t| t == c).count();
            let neg = truths.len() - pos;
            let tp = preds.iter().zip(truths).filter(|&(&p, &t)| t == c && p == c).count();
            let tn = preds.iter().zip(truths).filter(|&(&p, &t)| t != c && p != c).count();
            ((pos > 0).then(|| tp as f64 / pos as f64), (neg > 0).then(|| tn as f64 / neg as f64))
        })
        .collect()
}
