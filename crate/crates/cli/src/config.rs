//! Experiment configuration: JSON file + command-line overrides.
//!
//! Precedence is flag > config file > built-in default. Unknown keys are
//! rejected against the published schema, all of them reported at once.

use std::path::{Path, PathBuf};

use openset_core::data::{Layout, PrepareOptions};
use openset_core::openset::{OpenSetConfig, OpenSetMethod};
use openset_core::util::sha256_hex;
use openset_core::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const SCHEMA: &str = include_str!("../schema/experiment-config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: Layout,
}

fn default_layout() -> Layout {
    Layout::ClassFolders
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSweepSplit {
    Validation,
    TestA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    TestA,
    TestB,
    TestC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KSweepConfig {
    pub max_k: usize,
    pub split: KSweepSplit,
}

impl Default for KSweepConfig {
    fn default() -> Self {
        Self { max_k: 50, split: KSweepSplit::Validation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetConfig>,
    pub ood: Option<DatasetConfig>,
    pub target_size: Option<[usize; 2]>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub novel_class: Option<String>,
    pub augment: bool,
    pub precision: Precision,
    /// `train.seed` is not configurable on its own; it follows `seed`.
    pub train: TrainConfig,
    pub k: usize,
    pub k_sweep: KSweepConfig,
    pub open_set: OpenSetConfig,
    pub eval_split: Option<EvalSplit>,
    pub threshold_grid_step: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let prep = PrepareOptions::default();
        Self {
            dataset: None,
            ood: None,
            target_size: prep.target.map(|(h, w)| [h, w]),
            train_fraction: prep.train_fraction,
            validation_fraction: prep.validation_fraction,
            seed: 0,
            novel_class: None,
            augment: prep.augment,
            precision: Precision::F64,
            train: TrainConfig::default(),
            k: openset_core::space::DEFAULT_K,
            k_sweep: KSweepConfig::default(),
            open_set: OpenSetConfig::default(),
            eval_split: None,
            threshold_grid_step: 0.01,
            output_dir: PathBuf::from("openset-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<OpenSetMethod>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
}

/// Dotted paths of every key in `value` that the schema does not declare.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let mut out = Vec::new();
    walk(&schema, &schema, value, "", &mut out);
    out
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.trim_start_matches("#/$defs/");
            &root["$defs"][name]
        }
        None => node,
    }
}

fn walk(root: &Value, node: &Value, value: &Value, prefix: &str, out: &mut Vec<String>) {
    let node = resolve(root, node);
    let Some(obj) = value.as_object() else {
        return;
    };
    // an anyOf branch that describes an object
    let node = match node.get("anyOf").and_then(Value::as_array) {
        Some(branches) => match branches.iter().map(|b| resolve(root, b)).find(|b| b.get("properties").is_some()) {
            Some(b) => b,
            None => return,
        },
        None => node,
    };
    let Some(props) = node.get("properties").and_then(Value::as_object) else {
        return;
    };
    for (key, v) in obj {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match props.get(key) {
            Some(child) => walk(root, child, v, &path, out),
            None => out.push(path),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path, overrides)
    }

    pub fn from_json(text: &str, path: &Path, overrides: &Overrides) -> Result<Self> {
        let config_err = |reason: String| CliError::Config { path: path.to_path_buf(), reason };
        let value: Value = serde_json::from_str(text).map_err(|e| config_err(format!("invalid JSON: {e}")))?;
        if !value.is_object() {
            return Err(config_err("top level must be a JSON object".into()));
        }
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(CliError::UnknownKeys { path: path.to_path_buf(), keys: unknown });
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.apply(overrides);
        cfg.validate().map_err(config_err)?;
        // relative dataset paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for ds in cfg.dataset.iter_mut().chain(cfg.ood.iter_mut()) {
            if ds.path.is_relative() {
                ds.path = base.join(&ds.path);
            }
        }
        if overrides.out.is_none() && cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(m) = o.method {
            self.open_set.method = m;
        }
        if let Some(t) = o.threshold {
            match self.open_set.method {
                OpenSetMethod::Distance => self.open_set.radius = t,
                OpenSetMethod::Probability => self.open_set.p_threshold = t,
            }
        }
        if let Some(k) = o.k {
            self.k = k;
            self.open_set.k = k;
        }
        self.train.seed = self.seed;
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dataset.is_none() {
            return Err("`dataset.path` is required".into());
        }
        self.train.validate().map_err(|e| e.to_string())?;
        self.open_set.validate().map_err(|e| e.to_string())?;
        for (name, v) in [("train_fraction", self.train_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("`{name}` must lie in (0, 1), got {v}"));
            }
        }
        if self.target_size.is_some_and(|[h, w]| h == 0 || w == 0) {
            return Err("`target_size` entries must be positive".into());
        }
        if self.k == 0 || self.k_sweep.max_k == 0 {
            return Err("`k` and `k_sweep.max_k` must be at least 1".into());
        }
        openset_core::openset::threshold_grid(self.threshold_grid_step).map_err(|e| e.to_string())?;
        if self.eval_split == Some(EvalSplit::TestB) && self.novel_class.is_none() {
            return Err("`eval_split` test_b needs `novel_class`".into());
        }
        if self.eval_split == Some(EvalSplit::TestC) && self.ood.is_none() {
            return Err("`eval_split` test_c needs `ood`".into());
        }
        Ok(())
    }

    pub fn dataset(&self) -> &DatasetConfig {
        self.dataset.as_ref().expect("validated")
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            target: self.target_size.map(|[h, w]| (h, w)),
            train_fraction: self.train_fraction,
            validation_fraction: self.validation_fraction,
            seed: self.seed,
            novel_class: self.novel_class.clone(),
            augment: self.augment,
        }
    }

    /// Open-set evaluation split after applying the default rule.
    pub fn eval_split(&self) -> EvalSplit {
        self.eval_split.unwrap_or(if self.novel_class.is_some() {
            EvalSplit::TestB
        } else if self.ood.is_some() {
            EvalSplit::TestC
        } else {
            EvalSplit::TestA
        })
    }

    /// Hash of the effective configuration. The output directory is where
    /// results go, not what they are, so it is left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        sha256_hex(serde_json::to_string(&v).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(text, Path::new("/cfg/exp.json"), &Overrides::default())
    }

    #[test]
    fn minimal_config_gets_published_defaults() {
        let c = parse(r#"{"dataset": {"path": "data"}}"#).unwrap();
        assert_eq!(c.dataset().path, PathBuf::from("/cfg/data"));
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.optimizer.learning_rate, 1e-4);
        assert_eq!(c.train.margin, 0.2);
        assert_eq!(c.k, 26);
        assert!(c.train.l2_normalize);
        assert_eq!(c.train.embedding_dim, 128);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = parse(
            r#"{"dataset": {"path": "d", "colour": 1}, "epochs": 3, "train": {"seed": 4, "optimizer": {"lr": 1}}}"#,
        )
        .unwrap_err();
        match err {
            CliError::UnknownKeys { keys, .. } => {
                assert_eq!(keys, ["dataset.colour", "epochs", "train.optimizer.lr", "train.seed"]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn flags_beat_file_values() {
        let text =
            r#"{"dataset": {"path": "d"}, "seed": 3, "open_set": {"method": "distance", "radius": 0.5}, "k": 10}"#;
        let o = Overrides {
            seed: Some(9),
            method: Some(OpenSetMethod::Probability),
            threshold: Some(0.6),
            k: Some(4),
            out: Some("/tmp/x".into()),
        };
        let c = ExperimentConfig::from_json(text, Path::new("exp.json"), &o).unwrap();
        assert_eq!((c.seed, c.train.seed), (9, 9));
        assert_eq!(c.open_set.method, OpenSetMethod::Probability);
        assert_eq!(c.open_set.p_threshold, 0.6);
        assert_eq!(c.open_set.radius, 0.5);
        assert_eq!((c.k, c.open_set.k), (4, 4));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            r#"{}"#,
            r#"{"dataset": {"path": "d"}, "train_fraction": 1.0}"#,
            r#"{"dataset": {"path": "d"}, "open_set": {"radius": 1.5}}"#,
            r#"{"dataset": {"path": "d"}, "train": {"batch_size": 10}}"#,
            r#"{"dataset": {"path": "d"}, "threshold_grid_step": 0.3}"#,
            r#"{"dataset": {"path": "d"}, "eval_split": "test_b"}"#,
            r#"[1, 2]"#,
        ] {
            let e = parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = parse(r#"{"dataset": {"path": "d"}, "output_dir": "a"}"#).unwrap();
        let b = parse(r#"{"dataset": {"path": "d"}, "output_dir": "b"}"#).unwrap();
        let c = parse(r#"{"dataset": {"path": "d"}, "seed": 1}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn schema_declares_exactly_the_config_fields() {
        let mut full = serde_json::to_value(ExperimentConfig {
            dataset: Some(DatasetConfig { path: "d".into(), layout: Layout::CsvTable }),
            ood: Some(DatasetConfig { path: "o".into(), layout: Layout::CsvTable }),
            ..ExperimentConfig::default()
        })
        .unwrap();
        full["train"].as_object_mut().unwrap().remove("seed");
        assert!(unknown_keys(&full).is_empty(), "{:?}", unknown_keys(&full));
        // and the schema lists nothing the struct would reject
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        for key in schema["properties"].as_object().unwrap().keys() {
            assert!(full.get(key).is_some(), "schema key {key} missing from config");
        }
        for key in schema["properties"]["train"]["properties"].as_object().unwrap().keys() {
            assert!(full["train"].get(key).is_some(), "schema key train.{key} missing");
        }
    }
}
