use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::sha256_hex;

use super::{Architecture, LayerParams, NetworkParams};

/// On-disk form of [`NetworkParams`]: versioned JSON with per-layer weights
/// stored as `f64` arrays regardless of the in-memory scalar type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn from_params<T: Scalar>(params: &NetworkParams<T>) -> Self {
        Self {
            format_version: Self::FORMAT_VERSION,
            architecture: params.architecture.clone(),
            seed: params.seed,
            config_hash: None,
            layers: params
                .layers
                .iter()
                .map(|l| LayerWeights {
                    weights: l.weights.iter().map(|v| v.as_f64()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<NetworkParams<T>> {
        let reference: NetworkParams<T> = super::init_params(&self.architecture, self.seed)?;
        if reference.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} layers", reference.layers.len()),
                found: format!("{} layers in checkpoint", self.layers.len()),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (r, l)) in reference.layers.iter().zip(&self.layers).enumerate() {
            if r.weights.len() != l.weights.len() || r.bias.len() != l.bias.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i}: {} weights, {} biases", r.weights.len(), r.bias.len()),
                    found: format!("{} weights, {} biases", l.weights.len(), l.bias.len()),
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint layer {i}")));
            }
            layers.push(LayerParams {
                weights: l.weights.iter().map(|&v| T::lit(v)).collect(),
                bias: l.bias.iter().map(|&v| T::lit(v)).collect(),
            });
        }
        Ok(NetworkParams { architecture: self.architecture.clone(), seed: self.seed, layers })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != Self::FORMAT_VERSION {
            return Err(Error::FormatVersion { found: probe.format_version, expected: Self::FORMAT_VERSION });
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Content hash of the serialized checkpoint.
    pub fn id(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format { path: path.to_path_buf(), reason: j.to_string() },
            other => other,
        })
    }
}
