//! New-class detection over an [`EmbeddingSpace`].
//!
//! * Distance rule: majority vote among gallery rows within radius `r` of the
//!   query; no such rows means Novel.
//! * Probability rule: KNN class shares; the top class is accepted only when
//!   its share is strictly above the threshold, otherwise Novel.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{sensitivity_specificity, ConfusionMatrix};
use crate::scalar::Scalar;
use crate::space::{ClassificationResult, EmbeddingSpace, Neighbor, DEFAULT_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenSetMethod {
    Distance,
    Probability,
}

impl OpenSetMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            OpenSetMethod::Distance => "distance",
            OpenSetMethod::Probability => "probability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetConfig {
    pub method: OpenSetMethod,
    pub radius: f64,
    pub p_threshold: f64,
    pub k: usize,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        Self { method: OpenSetMethod::Distance, radius: 0.7, p_threshold: 0.7, k: DEFAULT_K }
    }
}

impl OpenSetConfig {
    /// The threshold the active method uses.
    pub fn threshold(&self) -> f64 {
        match self.method {
            OpenSetMethod::Distance => self.radius,
            OpenSetMethod::Probability => self.p_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            OpenSetMethod::Distance => check_unit_interval("radius", self.radius),
            OpenSetMethod::Probability => {
                if self.k == 0 {
                    return Err(Error::OutOfRange { name: "k", value: 0.0, range: "[1, gallery size]" });
                }
                check_unit_interval("p_threshold", self.p_threshold)
            }
        }
    }
}

fn check_unit_interval(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange { name, value: v, range: "(0, 1]" })
    }
}

fn decide_distance<T: Scalar>(space: &EmbeddingSpace<T>, sorted: &[Neighbor<T>], r: T) -> ClassificationResult<T> {
    let inside = sorted.partition_point(|n| n.distance <= r);
    let within = &sorted[..inside];
    if within.is_empty() {
        return ClassificationResult { ranked: Vec::new(), prediction: Label::Novel, neighbor_ids: Vec::new() };
    }
    let labels = space.labels();
    let mut counts = vec![0usize; space.num_classes()];
    // position of each class's nearest member in the sorted neighbor list
    let mut first_seen = vec![usize::MAX; space.num_classes()];
    for (pos, nb) in within.iter().enumerate() {
        let c = labels[nb.index];
        counts[c] += 1;
        first_seen[c] = first_seen[c].min(pos);
    }
    let mut ranked: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(first_seen[a].cmp(&first_seen[b])));
    let total = T::from_usize_lossy(within.len());
    ClassificationResult {
        prediction: Label::Known(ranked[0]),
        ranked: ranked.into_iter().map(|c| (c, T::from_usize_lossy(counts[c]) / total)).collect(),
        neighbor_ids: within.iter().map(|n| n.index).collect(),
    }
}

fn apply_probability_threshold<T: Scalar>(mut knn: ClassificationResult<T>, threshold: T) -> ClassificationResult<T> {
    if !(knn.max_probability() > threshold) {
        knn.prediction = Label::Novel;
    }
    knn
}

/// Majority vote over gallery rows with distance ≤ `r`. Vote ties go to the
/// tied class whose member is nearest.
pub fn classify_distance<T: Scalar>(space: &EmbeddingSpace<T>, query: &[T], r: f64) -> Result<ClassificationResult<T>> {
    check_unit_interval("radius", r)?;
    let sorted = space.neighbors(query)?;
    Ok(decide_distance(space, &sorted, T::lit(r)))
}

/// KNN prediction accepted only if its probability exceeds `p_threshold`.
pub fn classify_probability<T: Scalar>(
    space: &EmbeddingSpace<T>,
    query: &[T],
    k: usize,
    p_threshold: f64,
) -> Result<ClassificationResult<T>> {
    check_unit_interval("p_threshold", p_threshold)?;
    let knn = space.knn_classify(query, k)?;
    Ok(apply_probability_threshold(knn, T::lit(p_threshold)))
}

pub fn classify<T: Scalar>(
    space: &EmbeddingSpace<T>,
    query: &[T],
    config: &OpenSetConfig,
) -> Result<ClassificationResult<T>> {
    config.validate()?;
    match config.method {
        OpenSetMethod::Distance => classify_distance(space, query, config.radius),
        OpenSetMethod::Probability => classify_probability(space, query, config.k, config.p_threshold),
    }
}

pub fn classify_all<T: Scalar>(
    space: &EmbeddingSpace<T>,
    queries: &Matrix<T>,
    config: &OpenSetConfig,
) -> Result<Vec<ClassificationResult<T>>> {
    config.validate()?;
    (0..queries.rows()).into_par_iter().map(|i| classify(space, queries.row(i), config)).collect()
}

/// Thresholds `1/n, 2/n, ..., 1` for `step = 1/n`.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    let n = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("grid step {step} does not divide (0, 1] evenly")));
    }
    let n = n as usize;
    Ok((1..=n).map(|i| i as f64 / n as f64).collect())
}

/// Predictions of every query at every grid threshold, indexed
/// `[threshold][query]`.
pub fn predictions_over_grid<T: Scalar>(
    space: &EmbeddingSpace<T>,
    queries: &Matrix<T>,
    method: OpenSetMethod,
    grid: &[f64],
    k: usize,
) -> Result<Vec<Vec<Label>>> {
    for &t in grid {
        check_unit_interval("threshold", t)?;
    }
    if method == OpenSetMethod::Probability {
        space.check_k(k)?;
    }
    let per_query: Vec<Vec<Label>> = (0..queries.rows())
        .into_par_iter()
        .map(|i| -> Result<Vec<Label>> {
            let sorted = space.neighbors(queries.row(i))?;
            Ok(match method {
                OpenSetMethod::Distance => {
                    grid.iter().map(|&r| decide_distance(space, &sorted, T::lit(r)).prediction).collect()
                }
                OpenSetMethod::Probability => {
                    let knn = space.knn_from_sorted(&sorted, k);
                    grid.iter().map(|&t| apply_probability_threshold(knn.clone(), T::lit(t)).prediction).collect()
                }
            })
        })
        .collect::<Result<_>>()?;
    Ok((0..grid.len()).map(|t| per_query.iter().map(|p| p[t]).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    /// Per class (known classes, then Novel); `None` for classes absent from
    /// the test set.
    pub sensitivity: Vec<Option<f64>>,
    pub mean_known_sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub method: OpenSetMethod,
    pub k: usize,
    pub classes: Vec<String>,
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub chosen_threshold: f64,
    pub rationale: String,
}

/// Share of the best mean known-class sensitivity a threshold must keep to be
/// eligible for automatic selection.
pub const SELECTION_FRACTION: f64 = 0.95;

impl ThresholdSweep {
    pub fn point(&self, threshold: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| (p.threshold - threshold).abs() < 1e-12)
    }

    pub fn chosen_point(&self) -> &SweepPoint {
        self.point(self.chosen_threshold)
            .or_else(|| {
                self.points.iter().min_by(|a, b| {
                    (a.threshold - self.chosen_threshold).abs().total_cmp(&(b.threshold - self.chosen_threshold).abs())
                })
            })
            .expect("sweep has at least one point")
    }

    /// Replaces the automatic choice with a fixed threshold.
    pub fn override_threshold(&mut self, threshold: f64) -> Result<()> {
        check_unit_interval("threshold", threshold)?;
        self.chosen_threshold = threshold;
        self.rationale = "manual override".into();
        Ok(())
    }

    /// Long-form `threshold,class,sensitivity`; undefined sensitivities are `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,class,sensitivity\n");
        for p in &self.points {
            for (class, s) in self.classes.iter().zip(&p.sensitivity) {
                match s {
                    Some(v) => {
                        let _ = writeln!(out, "{},{},{}", p.threshold, class, v);
                    }
                    None => {
                        let _ = writeln!(out, "{},{},NA", p.threshold, class);
                    }
                }
            }
        }
        out
    }
}

/// Evaluates `method` at every threshold of the grid and picks an operating
/// point: among thresholds keeping mean known-class sensitivity within
/// [`SELECTION_FRACTION`] of its grid maximum, the one most favorable to
/// novelty detection (smallest radius, or largest probability threshold).
pub fn sweep_thresholds<T: Scalar>(
    space: &EmbeddingSpace<T>,
    queries: &Matrix<T>,
    truths: &[Label],
    method: OpenSetMethod,
    grid_step: f64,
    k: usize,
) -> Result<ThresholdSweep> {
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("threshold sweep test set".into()));
    }
    if queries.rows() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truths", queries.rows()),
            found: format!("{}", truths.len()),
        });
    }
    let grid = threshold_grid(grid_step)?;
    let preds = predictions_over_grid(space, queries, method, &grid, k)?;
    let mut points = Vec::with_capacity(grid.len());
    for (&threshold, p) in grid.iter().zip(&preds) {
        let cm = ConfusionMatrix::from_labels(p, truths, space.class_names(), true)?;
        let sensitivity: Vec<Option<f64>> = sensitivity_specificity(&cm).into_iter().map(|r| r.sensitivity).collect();
        let known: Vec<f64> = sensitivity[..cm.num_known()].iter().flatten().copied().collect();
        let mean_known_sensitivity = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
        points.push(SweepPoint { threshold, confusion: cm, sensitivity, mean_known_sensitivity });
    }
    let best = points.iter().filter_map(|p| p.mean_known_sensitivity).fold(f64::NEG_INFINITY, f64::max);
    let eligible = |p: &&SweepPoint| p.mean_known_sensitivity.is_some_and(|s| s >= SELECTION_FRACTION * best - 1e-12);
    let (chosen_threshold, rationale) = if best.is_finite() {
        match method {
            OpenSetMethod::Distance => (
                points.iter().find(eligible).expect("maximum is eligible").threshold,
                "auto: smallest radius keeping mean known-class sensitivity >= 95% of its maximum",
            ),
            OpenSetMethod::Probability => (
                points.iter().rev().find(eligible).expect("maximum is eligible").threshold,
                "auto: largest threshold keeping mean known-class sensitivity >= 95% of its maximum",
            ),
        }
    } else {
        (grid[grid.len() - 1], "fallback: no known-class samples, last grid value")
    };
    let mut classes = space.class_names().to_vec();
    classes.push(crate::metrics::NOVEL_NAME.to_string());
    Ok(ThresholdSweep { method, k, classes, grid, points, chosen_threshold, rationale: rationale.to_string() })
}
