use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerParams, NetworkConfig, ParamVector};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "delta-uq-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained network: configuration, seed and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub seed: u64,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    fan_in: usize,
    fan_out: usize,
    /// Row-major `fan_out x fan_in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    network: NetworkConfig,
    seed: u64,
    param_count: usize,
    layers: Vec<LayerFile>,
}

impl Checkpoint {
    pub fn new(network: NetworkConfig, seed: u64, params: ParamVector) -> Result<Self> {
        params.check_len(&network)?;
        Ok(Self { network, seed, params })
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .params
            .unflatten(&self.network)?
            .into_iter()
            .map(|l| LayerFile {
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                weights: l.weights,
                bias: l.bias,
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.network.clone(),
            seed: self.seed,
            param_count: self.params.len(),
            layers,
        };
        let mut text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(err(format!("not a checkpoint (format {:?})", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported checkpoint version {}", file.version)));
        }
        file.network.validate()?;
        if file.param_count != file.network.param_count() {
            return Err(err(format!(
                "param_count {} does not match the network's {}",
                file.param_count,
                file.network.param_count()
            )));
        }
        let layers: Vec<LayerParams> = file
            .layers
            .into_iter()
            .map(|l| LayerParams {
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                weights: l.weights,
                bias: l.bias,
            })
            .collect();
        let params = ParamVector::flatten(&file.network, &layers).map_err(|e| err(e.to_string()))?;
        Ok(Self {
            network: file.network,
            seed: file.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = NetworkConfig::new(vec![3, 4, 2], 0.01).unwrap();
        let params = ParamVector::init(&config, 5);
        Checkpoint::new(config, 5, params).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text, Path::new("c.json")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_wrong_version_and_shape() {
        let text = sample().to_json().unwrap();
        let bad = text.replace("\"version\": 1", "\"version\": 9");
        assert!(Checkpoint::from_json(&bad, Path::new("c.json")).unwrap_err().to_string().contains("version"));
        let bad = text.replace("\"param_count\": 26", "\"param_count\": 27");
        assert!(Checkpoint::from_json(&bad, Path::new("c.json")).is_err());
        let config = NetworkConfig::new(vec![3, 4, 2], 0.01).unwrap();
        assert!(Checkpoint::new(config, 0, ParamVector::zeros(3)).is_err());
    }
}
