//! The end-to-end split pipeline and its JSON membership manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::sha256_hex;

use super::{
    attach_novel_set, augment_flips, preprocess, stratified_split, withhold_class, Dataset, FeatureShape, SplitTag,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Resize target (height, width) for image data; ignored for flat vectors.
    pub target: Option<(usize, usize)>,
    pub train_fraction: f64,
    /// Share of train' carved off (stratified) for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
    pub novel_class: Option<String>,
    /// Flip-balance the training split (images only).
    pub augment: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            target: Some((128, 128)),
            train_fraction: 0.8,
            validation_fraction: 0.1,
            seed: 0,
            novel_class: None,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<T> {
    pub train: Dataset<T>,
    pub validation: Dataset<T>,
    pub test_a: Dataset<T>,
    pub test_b: Option<Dataset<T>>,
    pub test_c: Option<Dataset<T>>,
}

const VALIDATION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn preprocess_all<T: Scalar>(ds: &Dataset<T>, target: Option<(usize, usize)>) -> Result<Dataset<T>> {
    let Some(target) = target else {
        return Ok(ds.clone());
    };
    if ds.samples.iter().all(|s| !s.shape.is_image()) {
        return Ok(ds.clone());
    }
    use rayon::prelude::*;
    let samples = ds.samples.par_iter().map(|s| preprocess(s, target)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, class_names: ds.class_names.clone(), split: ds.split })
}

/// Preprocess → stratified split → optional class withholding → validation
/// carve → flip augmentation of train' → optional out-of-distribution test set.
pub fn prepare<T: Scalar>(full: &Dataset<T>, ood: Option<&Dataset<T>>, opts: &PrepareOptions) -> Result<Prepared<T>> {
    if !(opts.validation_fraction > 0.0 && opts.validation_fraction < 1.0) {
        return Err(Error::OutOfRange {
            name: "validation_fraction",
            value: opts.validation_fraction,
            range: "(0, 1)",
        });
    }
    let full = preprocess_all(full, opts.target)?;
    full.uniform_shape()?;
    let (train, test) = stratified_split(&full, opts.train_fraction, opts.seed)?;
    let (train, test_a, test_b) = match &opts.novel_class {
        Some(name) => {
            let (tr, a, b) = withhold_class(&train, &test, name)?;
            (tr, a, Some(b))
        }
        None => (train, test, None),
    };
    let (train, mut validation) =
        stratified_split(&train, 1.0 - opts.validation_fraction, opts.seed ^ VALIDATION_SEED_SALT)?;
    validation.split = SplitTag::Validation;
    let is_image = train.samples.first().is_some_and(|s| s.shape.is_image());
    let train = if opts.augment && is_image { augment_flips(&train)? } else { train };
    let test_c = match ood {
        Some(ood) => Some(attach_novel_set(&test_a, &preprocess_all(ood, opts.target)?)?),
        None => None,
    };
    Ok(Prepared { train, validation, test_a, test_b, test_c })
}

impl<T: Scalar> Prepared<T> {
    pub fn splits(&self) -> Vec<&Dataset<T>> {
        let mut out = vec![&self.train, &self.validation, &self.test_a];
        out.extend(self.test_b.as_ref());
        out.extend(self.test_c.as_ref());
        out
    }

    pub fn get(&self, tag: SplitTag) -> Option<&Dataset<T>> {
        match tag {
            SplitTag::Train => Some(&self.train),
            SplitTag::Validation => Some(&self.validation),
            SplitTag::TestA => Some(&self.test_a),
            SplitTag::TestB => self.test_b.as_ref(),
            SplitTag::TestC => self.test_c.as_ref(),
            SplitTag::Full => None,
        }
    }
}

/// Split membership by source id, for reproducibility checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub novel_class: Option<String>,
    pub shape: Option<FeatureShape>,
    pub splits: BTreeMap<String, Vec<String>>,
    /// Hash of the configuration that produced the splits; not part of [`Manifest::id`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Manifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn from_prepared<T: Scalar>(p: &Prepared<T>, novel_class: Option<&str>) -> Result<Self> {
        let splits = p
            .splits()
            .into_iter()
            .map(|ds| (ds.split.as_str().to_string(), ds.samples.iter().map(|s| s.source_id.clone()).collect()))
            .collect();
        Ok(Self {
            format_version: Self::FORMAT_VERSION,
            class_names: p.train.class_names.clone(),
            novel_class: novel_class.map(str::to_string),
            shape: p.train.uniform_shape()?,
            splits,
            config_hash: None,
        })
    }

    /// Content hash of the canonical JSON encoding, ignoring `config_hash`.
    pub fn id(&self) -> String {
        let bare = Self { config_hash: None, ..self.clone() };
        sha256_hex(serde_json::to_string(&bare).expect("manifest serializes").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        if m.format_version != Self::FORMAT_VERSION {
            return Err(Error::FormatVersion { found: m.format_version, expected: Self::FORMAT_VERSION });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gaussian_blobs;

    #[test]
    fn pipeline_on_flat_blobs() {
        let centers = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0], vec![5.0, 5.0]];
        let full: Dataset<f64> = gaussian_blobs(&centers, 100, 0.5, 11).unwrap();
        let opts = PrepareOptions { novel_class: Some("c3".into()), seed: 4, ..PrepareOptions::default() };
        let p = prepare(&full, None, &opts).unwrap();
        assert_eq!(p.train.num_classes(), 3);
        // 80 per class into train, 10% of that to validation
        assert_eq!(p.train.len() + p.validation.len(), 240);
        assert_eq!(p.validation.len(), 24);
        assert_eq!(p.test_a.len(), 60);
        assert_eq!(p.test_b.as_ref().unwrap().len(), 160);
        let m = Manifest::from_prepared(&p, opts.novel_class.as_deref()).unwrap();
        assert_eq!(m.splits.len(), 4);
        let again = prepare(&full, None, &opts).unwrap();
        assert_eq!(Manifest::from_prepared(&again, Some("c3")).unwrap().id(), m.id());
        let stamped = Manifest { config_hash: Some("abc".into()), ..m.clone() };
        assert_eq!(stamped.id(), m.id());
        assert_ne!(Manifest { novel_class: None, ..m.clone() }.id(), m.id());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }
}
