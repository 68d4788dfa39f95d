//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSource;
use crate::delta::{EstimatorKind, RankOrder};
use crate::nn::NetworkConfig;
use crate::oracle::SuiteConfig;
use crate::spectral::{LanczosConfig, OpgConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_k() -> usize {
    64
}

fn default_tol() -> f64 {
    1e-8
}

fn default_check_every() -> usize {
    10
}

fn default_block_size() -> usize {
    64
}

fn default_kinds() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: DatasetSource,
    #[serde(default)]
    pub test: Option<DatasetSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanczosSection {
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

impl Default for LanczosSection {
    fn default() -> Self {
        Self {
            max_iters: None,
            tol: default_tol(),
            check_every: default_check_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpgSection {
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub retain: Option<usize>,
}

impl Default for OpgSection {
    fn default() -> Self {
        Self {
            block_size: default_block_size(),
            retain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub lanczos: LanczosSection,
    #[serde(default)]
    pub opg: OpgSection,
}

impl Default for SpectralSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            lanczos: LanczosSection::default(),
            opg: OpgSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSection {
    /// Estimators computed by `uncertainty` when `--kind` is absent.
    #[serde(default = "default_kinds")]
    pub kinds: Vec<EstimatorKind>,
    #[serde(default)]
    pub order: RankOrder,
    #[serde(default)]
    pub top: Option<usize>,
}

impl Default for DeltaSection {
    fn default() -> Self {
        Self {
            kinds: default_kinds(),
            order: RankOrder::default(),
            top: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSection {
    /// Examples per parallel chunk in dataset reductions; 0 is serial.
    #[serde(default)]
    pub chunk_size: usize,
}

/// Everything a pipeline run needs. The global `seed` overrides
/// `training.seed` and seeds initialization, Lanczos starts and
/// subsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub spectral: SpectralSection,
    #[serde(default)]
    pub delta: DeltaSection,
    #[serde(default)]
    pub compute: ComputeSection,
    #[serde(default)]
    pub oracle: SuiteConfig,
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_toml(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.data.train.resolve(base);
        if let Some(test) = cfg.data.test.as_mut() {
            test.resolve(base);
        }
        for b in &mut cfg.oracle.bundles {
            if b.is_relative() {
                *b = base.join(&*b);
            }
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if self.spectral.k == 0 {
            return Err(Error::Config("spectral.k must be positive".into()));
        }
        if self.spectral.opg.block_size == 0 {
            return Err(Error::Config("spectral.opg.block_size must be positive".into()));
        }
        if !(self.spectral.lanczos.tol > 0.0) {
            return Err(Error::Config("spectral.lanczos.tol must be positive".into()));
        }
        if self.delta.kinds.is_empty() {
            return Err(Error::Config("delta.kinds must not be empty".into()));
        }
        let sources = std::iter::once(&self.data.train).chain(self.data.test.as_ref());
        for p in sources.flat_map(|s| s.paths()) {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn lanczos(&self, k: usize) -> LanczosConfig {
        LanczosConfig {
            k,
            max_iters: self.spectral.lanczos.max_iters,
            tol: self.spectral.lanczos.tol,
            seed: self.seed,
            check_every: self.spectral.lanczos.check_every,
        }
    }

    pub fn opg(&self, k: usize) -> OpgConfig {
        OpgConfig {
            k,
            block_size: self.spectral.opg.block_size,
            retain: self.spectral.opg.retain,
        }
    }
}
