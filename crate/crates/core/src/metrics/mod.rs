//! Evaluation metrics: confusion matrices, one-vs-rest sensitivity and
//! specificity, top-k accuracy, and the open-set scores NCS (share of novel
//! samples flagged Novel) and MN (mean share of known-class samples flagged
//! Novel).

mod pca;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::space::ClassificationResult;

pub use pca::{cluster_separation, pca_project, PcaProjection};

pub const NOVEL_NAME: &str = "Novel";

/// Rows are ground truth, columns are predictions. In open-set mode the last
/// row and column belong to Novel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub open_set: bool,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(
        predictions: &[Label],
        truths: &[Label],
        known_classes: &[String],
        open_set: bool,
    ) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} predictions", truths.len()),
                found: format!("{}", predictions.len()),
            });
        }
        let mut classes = known_classes.to_vec();
        if open_set {
            classes.push(NOVEL_NAME.to_string());
        }
        let mut cm = Self { counts: vec![vec![0; classes.len()]; classes.len()], classes, open_set };
        for (&p, &t) in predictions.iter().zip(truths) {
            let (r, c) = (cm.index_of(t)?, cm.index_of(p)?);
            cm.counts[r][c] += 1;
        }
        Ok(cm)
    }

    /// Matrix row/column of a label.
    pub fn index_of(&self, label: Label) -> Result<usize> {
        let known = self.num_known();
        match label {
            Label::Known(c) if c < known => Ok(c),
            Label::Novel if self.open_set => Ok(known),
            other => Err(Error::InvalidInput(format!(
                "label {other} is not one of the {} matrix classes",
                self.classes.len()
            ))),
        }
    }

    pub fn num_known(&self) -> usize {
        self.classes.len() - usize::from(self.open_set)
    }

    pub fn novel_index(&self) -> Option<usize> {
        self.open_set.then(|| self.classes.len() - 1)
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn micro_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes.len()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64)
    }

    /// Each row as a percentage of its population; empty rows are all zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter().map(|&v| if t == 0 { 0.0 } else { 100.0 * v as f64 / t as f64 }).collect()
            })
            .collect()
    }

    /// `truth,<pred classes...>` with counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion<T: Scalar>(
    results: &[ClassificationResult<T>],
    truths: &[Label],
    known_classes: &[String],
    open_set: bool,
) -> Result<ConfusionMatrix> {
    let preds: Vec<Label> = results.iter().map(|r| r.prediction).collect();
    ConfusionMatrix::from_labels(&preds, truths, known_classes, open_set)
}

/// One-vs-rest counts and rates for a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub class: String,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    /// `None` when the class has no ground-truth samples.
    pub sensitivity: Option<f64>,
    /// `None` when every sample belongs to the class.
    pub specificity: Option<f64>,
}

pub fn sensitivity_specificity(cm: &ConfusionMatrix) -> Vec<ClassRates> {
    let total = cm.total();
    (0..cm.classes.len())
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_ = cm.row_total(c) - tp;
            let fp = cm.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
            let tn = total - tp - fn_ - fp;
            let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
            ClassRates {
                class: cm.classes[c].clone(),
                tp,
                fn_,
                fp,
                tn,
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect()
}

/// Share of samples whose truth is among the first `k` ranked classes.
///
/// With `k = 1` the decision (`prediction`) is compared, so Novel truths hit
/// when predicted Novel. For `k > 1` Novel truths have no rank and are left
/// out of both numerator and denominator.
pub fn topk_accuracy<T: Scalar>(results: &[ClassificationResult<T>], truths: &[Label], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("top-k accuracy over zero samples".into()));
    }
    if results.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truths", results.len()),
            found: format!("{}", truths.len()),
        });
    }
    if k == 0 {
        return Err(Error::OutOfRange { name: "k", value: 0.0, range: "[1, ∞)" });
    }
    let (mut hits, mut counted) = (0usize, 0usize);
    for (r, &t) in results.iter().zip(truths) {
        if k == 1 {
            counted += 1;
            hits += usize::from(r.prediction == t);
        } else if let Label::Known(c) = t {
            counted += 1;
            hits += usize::from(r.ranked.iter().take(k).any(|&(rc, _)| rc == c));
        }
    }
    if counted == 0 {
        return Err(Error::EmptyInput(format!("no samples eligible for top-{k} accuracy")));
    }
    Ok(hits as f64 / counted as f64)
}

/// Mean over non-empty known rows of the percentage predicted Novel.
pub fn mn_score(cm: &ConfusionMatrix) -> Result<f64> {
    let novel =
        cm.novel_index().ok_or_else(|| Error::InvalidInput("MN score needs an open-set confusion matrix".into()))?;
    let shares: Vec<f64> = (0..cm.num_known())
        .filter(|&c| cm.row_total(c) > 0)
        .map(|c| 100.0 * cm.counts[c][novel] as f64 / cm.row_total(c) as f64)
        .collect();
    if shares.is_empty() {
        return Err(Error::EmptyInput("MN score: no known-class samples".into()));
    }
    Ok(shares.iter().sum::<f64>() / shares.len() as f64)
}

/// Percentage of Novel-truth samples predicted Novel.
pub fn ncs(cm: &ConfusionMatrix) -> Result<f64> {
    let novel = cm.novel_index().ok_or_else(|| Error::InvalidInput("NCS needs an open-set confusion matrix".into()))?;
    let total = cm.row_total(novel);
    if total == 0 {
        return Err(Error::EmptyInput("NCS: no Novel samples".into()));
    }
    Ok(100.0 * cm.counts[novel][novel] as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top3: f64,
    /// Set for open-set evaluations: Novel-truth samples are not part of the
    /// top-3 denominator.
    pub top3_excludes_novel: bool,
    pub per_class: Vec<ClassRates>,
    pub confusion: ConfusionMatrix,
    pub row_percentages: Vec<Vec<f64>>,
    pub ncs: Option<f64>,
    pub mn: Option<f64>,
}

impl EvalReport {
    pub fn build<T: Scalar>(
        results: &[ClassificationResult<T>],
        truths: &[Label],
        known_classes: &[String],
        open_set: bool,
    ) -> Result<Self> {
        let cm = confusion(results, truths, known_classes, open_set)?;
        let has_novel = open_set && cm.novel_index().is_some_and(|n| cm.row_total(n) > 0);
        Ok(Self {
            top1: topk_accuracy(results, truths, 1)?,
            top3: topk_accuracy(results, truths, 3).or_else(|e| match e {
                Error::EmptyInput(_) => Ok(0.0),
                other => Err(other),
            })?,
            top3_excludes_novel: open_set,
            per_class: sensitivity_specificity(&cm),
            row_percentages: cm.row_percentages(),
            ncs: if has_novel { Some(ncs(&cm)?) } else { None },
            mn: if open_set { mn_score(&cm).ok() } else { None },
            confusion: cm,
        })
    }

    /// Plain-text summary with percentages to two decimals.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(out, "top-1 accuracy: {:.2}%", 100.0 * self.top1);
        let _ = writeln!(
            out,
            "top-3 accuracy: {:.2}%{}",
            100.0 * self.top3,
            if self.top3_excludes_novel { " (known-class samples only)" } else { "" }
        );
        if let Some(v) = self.ncs {
            let _ = writeln!(out, "NCS: {v:.2}%");
        }
        if let Some(v) = self.mn {
            let _ = writeln!(out, "MN: {v:.2}%");
        }
        let width = self.confusion.classes.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "\n{:<width$}  {:>11}  {:>11}", "class", "sensitivity", "specificity");
        for r in &self.per_class {
            let _ = writeln!(out, "{:<width$}  {:>11}  {:>11}", r.class, pct(r.sensitivity), pct(r.specificity));
        }
        let _ = writeln!(out, "\nconfusion matrix (rows = truth, count / row %):");
        let _ = write!(out, "{:<width$}", "");
        for c in &self.confusion.classes {
            let _ = write!(out, "  {c:>16}");
        }
        out.push('\n');
        for ((name, row), prow) in self.confusion.classes.iter().zip(&self.confusion.counts).zip(&self.row_percentages)
        {
            let _ = write!(out, "{name:<width$}");
            for (v, p) in row.iter().zip(prow) {
                let _ = write!(out, "  {:>16}", format!("{v} / {p:.2}"));
            }
            out.push('\n');
        }
        out
    }
}
