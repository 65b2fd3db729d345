//! Output directory bookkeeping: every file written here is stamped with the
//! config hash and listed, with its SHA-256, in the command's run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use openset_core::util::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Precision};
use crate::error::{CliError, Result};

pub const CLI_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct OutputDir {
    dir: PathBuf,
    config_hash: String,
    written: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

impl OutputDir {
    pub fn create(dir: &Path, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), config_hash, written: BTreeMap::new() })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an input artifact, or an error naming the command that makes it.
    pub fn require(&self, name: &str, command: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { artifact: name.to_string(), dir: self.dir.clone(), command })
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// CSV with a leading `# config_hash: …` comment line.
    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# config_hash: {}\n{body}", self.config_hash);
        self.write_bytes(name, text.as_bytes())
    }

    /// Plain text with the hash on the first line.
    pub fn write_text(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("config_hash: {}\n\n{body}", self.config_hash);
        self.write_bytes(name, text.as_bytes())
    }

    /// Pretty JSON; objects get a `config_hash` key, anything else is wrapped
    /// as `{"config_hash": …, "data": …}`.
    pub fn write_json<S: Serialize>(&mut self, name: &str, payload: &S) -> Result<()> {
        let mut v = serde_json::to_value(payload).map_err(openset_core::Error::from)?;
        match &mut v {
            Value::Object(map) => {
                map.insert("config_hash".into(), Value::String(self.config_hash.clone()));
            }
            other => {
                v = json!({ "config_hash": self.config_hash, "data": other.take() });
            }
        }
        let text = serde_json::to_string_pretty(&v).map_err(openset_core::Error::from)? + "\n";
        self.write_bytes(name, text.as_bytes())
    }

    /// Reads a JSON artifact written by [`OutputDir::write_json`].
    pub fn read_json<D: DeserializeOwned>(&self, name: &str, command: &'static str) -> Result<D> {
        let p = self.require(name, command)?;
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        let bad = |reason: String| openset_core::Error::Format { path: p.clone(), reason };
        let mut v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if let Value::Object(map) = &mut v {
            map.remove("config_hash");
        }
        Ok(serde_json::from_value(v).map_err(|e| bad(e.to_string()))?)
    }

    /// Writes `config.resolved.json` and `run_<command>.json`. Nothing time-
    /// dependent goes in, so identical runs leave identical bytes.
    pub fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.write_json("config.resolved.json", cfg)?;
        let run = json!({
            "command": command,
            "seed": cfg.seed,
            "precision": match cfg.precision { Precision::F32 => "f32", Precision::F64 => "f64" },
            "versions": {
                "openset-core": openset_core::VERSION,
                "openset-cli": CLI_VERSION,
            },
            "artifacts": self.written,
        });
        let name = format!("run_{}.json", command.replace('-', "_"));
        self.write_json(&name, &run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_format_carries_the_hash() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(tmp.path(), "abc".into()).unwrap();
        out.write_csv("a.csv", "x,y\n1,2\n").unwrap();
        out.write_json("b.json", &json!({"v": 1})).unwrap();
        out.write_json("c.json", &[1, 2]).unwrap();
        out.write_text("d.txt", "hello\n").unwrap();
        for name in ["a.csv", "b.json", "c.json", "d.txt"] {
            let text = std::fs::read_to_string(tmp.path().join(name)).unwrap();
            assert!(text.contains("abc"), "{name}: {text}");
        }
        let back: Value = out.read_json("b.json", "x").unwrap();
        assert_eq!(back, json!({"v": 1}));
    }

    #[test]
    fn missing_input_names_its_producer() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutputDir::create(tmp.path(), "h".into()).unwrap();
        let msg = out.require("checkpoint.json", "train").unwrap_err().to_string();
        assert!(msg.contains("checkpoint.json") && msg.contains("openset train"), "{msg}");
    }
}
