//! Mini-batch Adam training with piecewise-constant learning rates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Dataset, Network, ParamVector};
use crate::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `(step, learning_rate)` pairs; the rate applies from `step` onward.
    pub schedule: Vec<(usize, f64)>,
    pub max_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shuffle: bool,
    /// Full-dataset cost and gradient norm are logged every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Stop early once the full-dataset gradient norm at a log point drops
    /// to this value.
    #[serde(default)]
    pub stop_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            schedule: vec![(0, 1e-3), (4000, 1e-4), (6000, 1e-5)],
            max_steps: 8000,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
            shuffle: false,
            log_every: default_log_every(),
            stop_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, max_steps and log_every must be positive".into(),
            ));
        }
        match self.schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("schedule must start at step 0".into())),
        }
        if self.schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "schedule steps must be strictly increasing".into(),
            ));
        }
        if self.schedule.iter().any(|&(_, lr)| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        self.schedule
            .iter()
            .rev()
            .find(|&&(s, _)| s <= step)
            .map(|&(_, lr)| lr)
            .unwrap_or(self.schedule[0].1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub cost: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: ParamVector,
    pub steps_run: usize,
    pub final_cost: f64,
    /// Norm of the full-dataset gradient at the returned parameters.
    pub final_grad_norm: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub log: Vec<LogRecord>,
}

impl TrainReport {
    /// Training log as comma-separated text with a header row.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,learning_rate,cost,grad_norm\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.learning_rate, r.cost, r.grad_norm);
        }
        out
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, cfg: &TrainConfig, lr: f64, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Cycles through the training set in fixed order, or in a fresh seeded
/// permutation per pass when shuffling.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: Option<ChaCha8Rng>,
}

impl Batches {
    fn new(n: usize, shuffle: bool, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            cursor: 0,
            rng: shuffle.then(|| ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c)),
        };
        if let Some(rng) = b.rng.as_mut() {
            b.order.shuffle(rng);
        }
        b
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                if let Some(rng) = self.rng.as_mut() {
                    self.order.shuffle(rng);
                }
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains from the seeded default initialization.
pub fn train(
    network: &Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let init = ParamVector::init(network.config(), cfg.seed);
    train_from(network, data, test, cfg, init)
}

pub fn train_from(
    network: &Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    init: ParamVector,
) -> Result<TrainReport> {
    cfg.validate()?;
    init.check_len(network.config())?;
    let mut w = init;
    let p = w.len();
    let mut adam = Adam {
        m: vec![0.0; p],
        v: vec![0.0; p],
        t: 0,
    };
    let batch_size = cfg.batch_size.min(data.len());
    let mut batches = Batches::new(data.len(), cfg.shuffle, cfg.seed);
    let mut log = Vec::new();
    let mut steps_run = 0;

    for step in 0..cfg.max_steps {
        let lr = cfg.learning_rate(step);
        let batch = batches.next(batch_size);
        let (cost, g) = network.cost_and_grad_on(&w, data, &batch)?;
        if !cost.is_finite() {
            return Err(Error::NonFiniteCost { step, cost });
        }
        adam.step(cfg, lr, w.as_mut_slice(), g.as_slice());
        steps_run = step + 1;

        if steps_run % cfg.log_every == 0 {
            let (full_cost, full_grad) = full_diagnostics(network, &w, data)?;
            if !full_cost.is_finite() {
                return Err(Error::NonFiniteCost {
                    step,
                    cost: full_cost,
                });
            }
            log.push(LogRecord {
                step: steps_run,
                learning_rate: lr,
                cost: full_cost,
                grad_norm: full_grad,
            });
            if cfg.stop_grad_norm.is_some_and(|tol| full_grad <= tol) {
                break;
            }
        }
    }

    let (final_cost, final_grad_norm) = full_diagnostics(network, &w, data)?;
    let train_accuracy = accuracy(network, &w, data)?;
    let test_accuracy = test.map(|t| accuracy(network, &w, t)).transpose()?;
    Ok(TrainReport {
        params: w,
        steps_run,
        final_cost,
        final_grad_norm,
        train_accuracy,
        test_accuracy,
        log,
    })
}

fn full_diagnostics(network: &Network, w: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (cost, g) = network.cost_and_grad_on(w, data, &all)?;
    Ok((cost, g.norm_squared().sqrt()))
}

/// Fraction of examples whose arg-max prediction matches the label.
pub fn accuracy(network: &Network, w: &ParamVector, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for n in 0..data.len() {
        if network.predict(w, data.input(n))? == data.label(n) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs::{self, BlobsConfig};
    use crate::nn::NetworkConfig;

    fn convex_problem() -> (Network, Dataset) {
        let cfg = BlobsConfig {
            classes: 3,
            dim: 2,
            separation: 4.0,
            noise: 0.5,
            n: 150,
            seed: 1,
        };
        let data = blobs::generate(&cfg).unwrap();
        let net = Network::new(NetworkConfig::new(vec![2, 3], 0.01).unwrap()).unwrap();
        (net, data)
    }

    #[test]
    fn schedule_validation_and_lookup() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(3999), 1e-3);
        assert_eq!(cfg.learning_rate(4000), 1e-4);
        assert_eq!(cfg.learning_rate(100_000), 1e-5);
        cfg.schedule = vec![(0, 1e-3), (0, 1e-4)];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![(5, 1e-3)];
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn convex_case_converges() {
        let (net, data) = convex_problem();
        let cfg = TrainConfig {
            batch_size: data.len(),
            schedule: vec![(0, 5e-2), (1500, 1e-2), (3000, 2e-3), (4500, 4e-4)],
            max_steps: 6000,
            stop_grad_norm: Some(1e-5),
            ..TrainConfig::default()
        };
        let report = train(&net, &data, None, &cfg).unwrap();
        assert!(report.final_grad_norm <= 1e-4, "{}", report.final_grad_norm);
        assert!(report.train_accuracy > 0.9);
        // Regularizer bound on the minimizer.
        let c0 = net.cost(&ParamVector::zeros(net.param_count()), &data).unwrap();
        assert!(report.params.norm_squared() <= 2.0 * c0 / 0.01);
    }

    #[test]
    fn cost_decreases_over_windows() {
        let (net, data) = convex_problem();
        let cfg = TrainConfig {
            batch_size: 50,
            schedule: vec![(0, 1e-2)],
            max_steps: 1000,
            ..TrainConfig::default()
        };
        let report = train(&net, &data, None, &cfg).unwrap();
        assert_eq!(report.log.len(), 10);
        for pair in report.log.windows(2) {
            assert!(pair[1].cost < pair[0].cost);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (net, data) = convex_problem();
        for shuffle in [false, true] {
            let cfg = TrainConfig {
                batch_size: 32,
                max_steps: 300,
                shuffle,
                seed: 5,
                ..TrainConfig::default()
            };
            let a = train(&net, &data, Some(&data), &cfg).unwrap();
            let b = train(&net, &data, Some(&data), &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn non_finite_cost_aborts_with_step() {
        let (net, data) = convex_problem();
        let cfg = TrainConfig {
            batch_size: 10,
            max_steps: 5,
            ..TrainConfig::default()
        };
        let mut init = ParamVector::zeros(net.param_count());
        init.as_mut_slice()[0] = f64::NAN;
        match train_from(&net, &data, None, &cfg, init) {
            Err(Error::NonFiniteCost { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteCost, got {other:?}"),
        }
    }

    #[test]
    fn accuracy_counts() {
        let net = Network::new(NetworkConfig::new(vec![1, 2], 0.0).unwrap()).unwrap();
        // Predicts class 1 when x > 0, class 0 otherwise.
        let w = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
        let data = Dataset::from_labels(1, 2, vec![-1.0, 2.0, 3.0], &[0, 1, 1]).unwrap();
        assert_eq!(accuracy(&net, &w, &data).unwrap(), 1.0);
        let wrong = Dataset::from_labels(1, 2, vec![-1.0], &[1]).unwrap();
        assert_eq!(accuracy(&net, &w, &wrong).unwrap(), 0.0);

        // Uniform predictor always answers class 0 (lowest index on ties).
        let zero = ParamVector::zeros(4);
        let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let balanced = Dataset::from_labels(1, 2, vec![0.5; 1000], &labels).unwrap();
        let acc = accuracy(&net, &zero, &balanced).unwrap();
        assert!((acc - 0.5).abs() <= 0.1);
    }
}
