use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Softmax,
}

/// Layer widths and regularization of a dense classifier.
///
/// `layer_sizes[0]` is the input width and the last entry is the number of
/// classes. `l2_rate` is the factor in `(l2_rate / 2) * |w|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
    #[serde(default)]
    pub output_activation: OutputActivation,
    pub l2_rate: f64,
}

/// Offsets of one layer's weights and bias inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl NetworkConfig {
    pub fn new(layer_sizes: Vec<usize>, l2_rate: f64) -> Result<Self> {
        let config = Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Softmax,
            l2_rate,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&t| t == 0) {
            return Err(Error::Config(format!("layer {pos} has zero width")));
        }
        if !(self.l2_rate.is_finite() && self.l2_rate >= 0.0) {
            return Err(Error::Config(format!(
                "l2_rate must be finite and non-negative, got {}",
                self.l2_rate
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated config")
    }

    /// Total parameter count: sum over layers of `fan_in * fan_out + fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = layer.end();
                layer
            })
            .collect()
    }

    /// Same architecture with a different regularization rate.
    pub fn with_l2_rate(&self, l2_rate: f64) -> Self {
        Self {
            l2_rate,
            ..self.clone()
        }
    }
}
