//! Gaussian blob classification data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    /// Distance between any two class means (exact when `classes <= dim`).
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each mean.
    pub noise: f64,
    pub n: usize,
    pub seed: u64,
}

/// Class means. With `classes <= dim` they sit on scaled coordinate axes so
/// every pair is `separation` apart; otherwise on fixed pseudo-random
/// directions that do not depend on the sample seed.
pub fn class_means(cfg: &BlobsConfig) -> Vec<Vec<f64>> {
    let radius = cfg.separation / std::f64::consts::SQRT_2;
    if cfg.classes <= cfg.dim {
        return (0..cfg.classes)
            .map(|c| {
                let mut m = vec![0.0; cfg.dim];
                m[c] = radius;
                m
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x000b_10b5);
    (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| radius * x / norm).collect()
        })
        .collect()
}

fn validate(cfg: &BlobsConfig) -> Result<()> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.n == 0 {
        return Err(Error::Config(
            "blobs need at least 2 classes, a positive dimension and n > 0".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.separation.is_finite()) {
        return Err(Error::Config("blobs noise must be non-negative".into()));
    }
    Ok(())
}

/// Balanced blobs: example `i` has label `i % classes`.
pub fn generate(cfg: &BlobsConfig) -> Result<Dataset> {
    validate(cfg)?;
    let means = class_means(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs = Vec::with_capacity(cfg.n * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let c = i % cfg.classes;
        for d in 0..cfg.dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(means[c][d] + cfg.noise * z);
        }
        labels.push(c);
    }
    Dataset::from_labels(cfg.dim, cfg.classes, inputs, &labels)
}

/// Inputs far outside the blob support: random directions at `radius`
/// times the distance of the class means from the origin.
pub fn ood_probes(cfg: &BlobsConfig, count: usize, radius: f64, seed: u64) -> Result<Dataset> {
    validate(cfg)?;
    let scale = radius * cfg.separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(count * cfg.dim);
    for _ in 0..count {
        let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        inputs.extend(v.into_iter().map(|x| scale * x / norm));
    }
    let labels = vec![0; count];
    Dataset::from_labels(cfg.dim, cfg.classes, inputs, &labels)
}
