//! Labeled samples, dataset splitting and class withholding.
//!
//! A [`Dataset`] is an ordered list of [`LabeledSample`]s plus the names of the
//! known classes. Ground truth is a [`Label`]: either an index into
//! `class_names` or the reserved [`Label::Novel`] used for withheld and
//! out-of-distribution samples.

mod load;
pub mod manifest;
mod preprocess;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use load::{load_dataset, Layout};
pub use manifest::{prepare, Manifest, PrepareOptions, Prepared};
pub use preprocess::{flip_horizontal, flip_vertical, preprocess, resize_bilinear};

/// Ground-truth or predicted class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Novel,
}

impl Label {
    pub fn known(self) -> Option<usize> {
        match self {
            Label::Known(c) => Some(c),
            Label::Novel => None,
        }
    }

    pub fn is_novel(self) -> bool {
        self == Label::Novel
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Known(c) => write!(f, "{c}"),
            Label::Novel => f.write_str("Novel"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    Image { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Image { channels, height, width } => channels * height * width,
            FeatureShape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, FeatureShape::Image { .. })
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureShape::Image { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
            FeatureShape::Flat(d) => write!(f, "[{d}]"),
        }
    }
}

/// One input: image tensor (channel-major C×H×W) or flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<T> {
    pub features: Vec<T>,
    pub shape: FeatureShape,
    pub label: Label,
    pub source_id: String,
    /// Largest value the source encoding can hold (255 for 8-bit images).
    /// Preprocessing divides by it and resets it to 1.
    pub value_max: f64,
}

impl<T: Scalar> LabeledSample<T> {
    pub fn new(features: Vec<T>, shape: FeatureShape, label: Label, source_id: impl Into<String>) -> Result<Self> {
        if features.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape} ({} values)", shape.len()),
                found: format!("{} values", features.len()),
            });
        }
        Ok(Self { features, shape, label, source_id: source_id.into(), value_max: 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Validation,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
    #[serde(rename = "testC")]
    TestC,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::TestA => "testA",
            SplitTag::TestB => "testB",
            SplitTag::TestC => "testC",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<LabeledSample<T>>,
    pub class_names: Vec<String>,
    pub split: SplitTag,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<LabeledSample<T>>, class_names: Vec<String>, split: SplitTag) -> Result<Self> {
        let ds = Self { samples, class_names, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Shape shared by every sample, or an error if the samples disagree.
    pub fn uniform_shape(&self) -> Result<Option<FeatureShape>> {
        let mut shape = None;
        for s in &self.samples {
            match shape {
                None => shape = Some(s.shape),
                Some(sh) if sh != s.shape => {
                    return Err(Error::IncompatibleDataset(format!(
                        "sample `{}` has shape {}, dataset uses {sh}",
                        s.source_id, s.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(shape)
    }

    /// Sample indices grouped by label, in dataset order.
    pub fn indices_by_label(&self) -> BTreeMap<Label, Vec<usize>> {
        let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry(s.label).or_default().push(i);
        }
        groups
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            if let Label::Known(c) = s.label {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(Error::InvalidInput(format!("duplicate class name `{name}`")));
            }
        }
        for s in &self.samples {
            if let Label::Known(c) = s.label {
                if c >= self.class_names.len() {
                    return Err(Error::InvalidInput(format!(
                        "sample `{}` has class id {c} but only {} classes exist",
                        s.source_id,
                        self.class_names.len()
                    )));
                }
            }
            if s.features.len() != s.shape.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} values for shape {}", s.shape.len(), s.shape),
                    found: format!("{} values in `{}`", s.features.len(), s.source_id),
                });
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of `{}`", s.source_id)));
            }
        }
        Ok(())
    }

    fn with_samples(&self, samples: Vec<LabeledSample<T>>, split: SplitTag) -> Self {
        Self { samples, class_names: self.class_names.clone(), split }
    }
}

/// Per-class random partition into train and test parts.
///
/// Each class contributes `round(train_fraction * n)` samples to the train
/// part, clamped so both parts receive at least one sample. Both outputs keep
/// the input's relative sample order.
pub fn stratified_split<T: Scalar>(
    ds: &Dataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::OutOfRange { name: "train_fraction", value: train_fraction, range: "(0, 1)" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.len()];
    for (label, mut idx) in ds.indices_by_label() {
        let n = idx.len();
        if n < 2 {
            let class = match label {
                Label::Known(c) => ds.class_names[c].clone(),
                Label::Novel => "Novel".into(),
            };
            return Err(Error::Stratification { class, count: n });
        }
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in ds.samples.iter().zip(&in_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((ds.with_samples(train, SplitTag::Train), ds.with_samples(test, SplitTag::TestA)))
}

/// Removes `novel_class` from training and turns it into the Novel ground truth.
///
/// Returns `(train', testA, testB)`. Class ids are renumbered over the
/// remaining class names. `testB` is `testA` followed by every withheld sample
/// (those from `train` first, then those from `test`), all labeled Novel.
pub fn withhold_class<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    novel_class: &str,
) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    if train.class_names != test.class_names {
        return Err(Error::IncompatibleDataset("train and test have different class lists".into()));
    }
    let novel = train.class_index(novel_class).ok_or_else(|| Error::UnknownClass(novel_class.to_string()))?;
    let remap = |label: Label| match label {
        Label::Known(c) if c == novel => Label::Novel,
        Label::Known(c) if c > novel => Label::Known(c - 1),
        other => other,
    };
    let class_names: Vec<String> =
        train.class_names.iter().enumerate().filter(|&(i, _)| i != novel).map(|(_, n)| n.clone()).collect();

    let mut kept_train = Vec::new();
    let mut withheld = Vec::new();
    for s in &train.samples {
        let mut s = s.clone();
        s.label = remap(s.label);
        if s.label.is_novel() {
            withheld.push(s);
        } else {
            kept_train.push(s);
        }
    }
    let mut test_a = Vec::new();
    for s in &test.samples {
        let mut s = s.clone();
        s.label = remap(s.label);
        if s.label.is_novel() {
            withheld.push(s);
        } else {
            test_a.push(s);
        }
    }
    let mut test_b = test_a.clone();
    test_b.extend(withheld);

    let make = |samples, split| Dataset { samples, class_names: class_names.clone(), split };
    Ok((make(kept_train, SplitTag::Train), make(test_a, SplitTag::TestA), make(test_b, SplitTag::TestB)))
}

/// Appends an out-of-distribution set to `test_a`, labeled Novel.
pub fn attach_novel_set<T: Scalar>(test_a: &Dataset<T>, ood: &Dataset<T>) -> Result<Dataset<T>> {
    let expected = test_a.uniform_shape()?;
    let mut samples = test_a.samples.clone();
    for s in &ood.samples {
        if let Some(shape) = expected {
            if s.shape != shape {
                return Err(Error::IncompatibleDataset(format!(
                    "out-of-distribution sample `{}` has shape {}, test set uses {shape}",
                    s.source_id, s.shape
                )));
            }
        }
        let mut s = s.clone();
        s.label = Label::Novel;
        samples.push(s);
    }
    Ok(test_a.with_samples(samples, SplitTag::TestC))
}

/// Balances minority classes with horizontal, then vertical, flips.
///
/// Every class smaller than the largest one gains the horizontal flips of its
/// samples (in order) until it reaches the majority size, then vertical flips
/// if it is still short. A class therefore never exceeds three times its
/// original size. Augmented copies are appended after the originals and carry
/// `#hflip` / `#vflip` source-id suffixes.
pub fn augment_flips<T: Scalar>(train: &Dataset<T>) -> Result<Dataset<T>> {
    if let Some(s) = train.samples.iter().find(|s| !s.shape.is_image()) {
        return Err(Error::UnsupportedOperation(format!(
            "flip augmentation needs image samples, `{}` is a flat vector",
            s.source_id
        )));
    }
    let groups = train.indices_by_label();
    let majority = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut samples = train.samples.clone();
    for idx in groups.values() {
        let mut deficit = majority - idx.len();
        for (suffix, flip) in [
            ("#hflip", flip_horizontal::<T> as fn(&LabeledSample<T>) -> Result<LabeledSample<T>>),
            ("#vflip", flip_vertical::<T>),
        ] {
            for &i in idx.iter().take(deficit) {
                let mut s = flip(&train.samples[i])?;
                s.source_id.push_str(suffix);
                samples.push(s);
            }
            deficit -= deficit.min(idx.len());
        }
    }
    Ok(train.with_samples(samples, train.split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_ds(counts: &[usize]) -> Dataset<f64> {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(
                    LabeledSample::new(
                        vec![c as f64, i as f64],
                        FeatureShape::Flat(2),
                        Label::Known(c),
                        format!("c{c}/{i}"),
                    )
                    .unwrap(),
                );
            }
        }
        let names = (0..counts.len()).map(|c| format!("{}", (b'a' + c as u8) as char)).collect();
        Dataset::new(samples, names, SplitTag::Full).unwrap()
    }

    fn image_ds(counts: &[usize]) -> Dataset<f64> {
        let shape = FeatureShape::Image { channels: 1, height: 2, width: 2 };
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(
                    LabeledSample::new(vec![1.0, 2.0, 3.0, 4.0], shape, Label::Known(c), format!("c{c}/{i}")).unwrap(),
                );
            }
        }
        let names = (0..counts.len()).map(|c| format!("k{c}")).collect();
        Dataset::new(samples, names, SplitTag::Train).unwrap()
    }

    #[test]
    fn split_80_20_per_class() {
        let ds = flat_ds(&[50, 50]);
        let (train, test) = stratified_split(&ds, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(train.class_counts(), vec![40, 40]);
        assert_eq!(test.class_counts(), vec![10, 10]);
    }

    #[test]
    fn split_half_of_four() {
        let ds = flat_ds(&[4]);
        let (train, test) = stratified_split(&ds, 0.5, 1).unwrap();
        assert_eq!((train.len(), test.len()), (2, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = flat_ds(&[13, 21, 8]);
        let a = stratified_split(&ds, 0.8, 99).unwrap();
        let b = stratified_split(&ds, 0.8, 99).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&ds, 0.8, 100).unwrap();
        assert_ne!(a.0.samples, c.0.samples);
    }

    #[test]
    fn split_rejects_singleton_class() {
        let ds = flat_ds(&[5, 1]);
        match stratified_split(&ds, 0.8, 0) {
            Err(Error::Stratification { class, count }) => {
                assert_eq!(class, "b");
                assert_eq!(count, 1);
            }
            other => panic!("expected stratification error, got {other:?}"),
        }
        assert!(stratified_split(&flat_ds(&[5]), 1.0, 0).is_err());
    }

    #[test]
    fn withhold_removes_and_relabels() {
        let full = flat_ds(&[125, 125, 125, 125, 125]);
        let (train, test) = stratified_split(&full, 0.8, 3).unwrap();
        assert_eq!(train.len(), 500);
        let (train2, test_a, test_b) = withhold_class(&train, &test, "e").unwrap();
        assert_eq!(train2.len(), 400);
        assert_eq!(train2.num_classes(), 4);
        assert!(train2.samples.iter().all(|s| !s.label.is_novel()));
        assert!(test_a.samples.iter().all(|s| !s.label.is_novel()));
        assert_eq!(test_b.len(), test_a.len() + 125);
        let novel: Vec<_> = test_b.samples.iter().filter(|s| s.label.is_novel()).collect();
        assert_eq!(novel.len(), 125);
        assert!(novel.iter().all(|s| s.source_id.starts_with("c4/")));
    }

    #[test]
    fn withhold_renumbers_classes_after_novel() {
        let full = flat_ds(&[4, 4, 4]);
        let (train, test) = stratified_split(&full, 0.5, 3).unwrap();
        let (train2, _, _) = withhold_class(&train, &test, "b").unwrap();
        assert_eq!(train2.class_names, vec!["a", "c"]);
        for s in &train2.samples {
            let expected = if s.source_id.starts_with("c0/") { 0 } else { 1 };
            assert_eq!(s.label, Label::Known(expected));
        }
    }

    #[test]
    fn withhold_unknown_class() {
        let full = flat_ds(&[4, 4]);
        let (train, test) = stratified_split(&full, 0.5, 3).unwrap();
        assert!(matches!(withhold_class(&train, &test, "zzz"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn attach_counts_and_labels() {
        let test_a = image_ds(&[100, 100]);
        let mut ood = image_ds(&[530]);
        ood.class_names = vec!["faces".into()];
        let test_c = attach_novel_set(&test_a, &ood).unwrap();
        assert_eq!(test_c.len(), 730);
        assert_eq!(test_c.samples.iter().filter(|s| s.label.is_novel()).count(), 530);

        let empty = Dataset { samples: vec![], ..ood.clone() };
        assert_eq!(attach_novel_set(&test_a, &empty).unwrap().samples, test_a.samples);

        let wrong = LabeledSample::new(
            vec![0.0; 8],
            FeatureShape::Image { channels: 2, height: 2, width: 2 },
            Label::Known(0),
            "x",
        )
        .unwrap();
        let bad = Dataset { samples: vec![wrong], ..ood };
        assert!(matches!(attach_novel_set(&test_a, &bad), Err(Error::IncompatibleDataset(_))));
    }

    #[test]
    fn augment_minority_to_three_times() {
        let ds = image_ds(&[100, 30]);
        let out = augment_flips(&ds).unwrap();
        assert_eq!(out.class_counts(), vec![100, 90]);
        let h = out.samples.iter().filter(|s| s.source_id.ends_with("#hflip")).count();
        let v = out.samples.iter().filter(|s| s.source_id.ends_with("#vflip")).count();
        assert_eq!((h, v), (30, 30));
        // originals retained in front
        assert_eq!(&out.samples[..130], &ds.samples[..]);
    }

    #[test]
    fn augment_partial_deficit() {
        let out = augment_flips(&image_ds(&[10, 7])).unwrap();
        assert_eq!(out.class_counts(), vec![10, 10]);
        assert_eq!(out.samples.iter().filter(|s| s.source_id.ends_with("#vflip")).count(), 0);
    }

    #[test]
    fn augment_balanced_is_identity() {
        let ds = image_ds(&[5, 5]);
        assert_eq!(augment_flips(&ds).unwrap(), ds);
        assert!(augment_flips(&flat_ds(&[2, 1])).is_err());
    }
}
