use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetworkConfig;
use crate::{Error, Result};

/// Flat parameter vector in the layout given by [`NetworkConfig::layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

/// Weights (row-major, `fan_out x fan_in`) and bias of a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Zero-mean normal weights with standard deviation `1/sqrt(fan_in)`,
    /// zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; config.param_count()];
        for layer in config.layout() {
            let normal = Normal::new(0.0, 1.0 / (layer.fan_in as f64).sqrt())
                .expect("positive standard deviation");
            for w in &mut values[layer.weight_offset..layer.bias_offset] {
                *w = normal.sample(&mut rng);
            }
        }
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn check_len(&self, config: &NetworkConfig) -> Result<()> {
        let expected = config.param_count();
        if self.0.len() != expected {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected,
                actual: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn unflatten(&self, config: &NetworkConfig) -> Result<Vec<LayerParams>> {
        self.check_len(config)?;
        Ok(config
            .layout()
            .into_iter()
            .map(|l| LayerParams {
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                weights: self.0[l.weight_offset..l.bias_offset].to_vec(),
                bias: self.0[l.bias_offset..l.end()].to_vec(),
            })
            .collect())
    }

    pub fn flatten(config: &NetworkConfig, layers: &[LayerParams]) -> Result<Self> {
        let layout = config.layout();
        if layers.len() != layout.len() {
            return Err(Error::Dimension {
                what: "layer count",
                expected: layout.len(),
                actual: layers.len(),
            });
        }
        let mut values = Vec::with_capacity(config.param_count());
        for (l, p) in layout.iter().zip(layers) {
            if p.weights.len() != l.weight_len() || p.bias.len() != l.fan_out {
                return Err(Error::Dimension {
                    what: "layer parameters",
                    expected: l.weight_len() + l.fan_out,
                    actual: p.weights.len() + p.bias.len(),
                });
            }
            values.extend_from_slice(&p.weights);
            values.extend_from_slice(&p.bias);
        }
        Ok(Self(values))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(
            sizes in prop::collection::vec(1usize..6, 2..5),
            seed in any::<u64>(),
        ) {
            let config = NetworkConfig::new(sizes, 0.01).unwrap();
            let w = ParamVector::init(&config, seed);
            let layers = w.unflatten(&config).unwrap();
            prop_assert_eq!(ParamVector::flatten(&config, &layers).unwrap(), w);
        }
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let config = NetworkConfig::new(vec![3, 4, 2], 0.01).unwrap();
        let a = ParamVector::init(&config, 7);
        assert_eq!(a, ParamVector::init(&config, 7));
        assert_ne!(a, ParamVector::init(&config, 8));
        for layer in a.unflatten(&config).unwrap() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn weights_are_row_major() {
        let config = NetworkConfig::new(vec![2, 3], 0.0).unwrap();
        let w = ParamVector::new((0..9).map(f64::from).collect());
        let layers = w.unflatten(&config).unwrap();
        // Row 1 of W holds the weights into output unit 1.
        assert_eq!(&layers[0].weights[2..4], &[2.0, 3.0]);
        assert_eq!(layers[0].bias, vec![6.0, 7.0, 8.0]);
    }
}
