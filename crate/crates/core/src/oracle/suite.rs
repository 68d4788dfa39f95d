//! The oracle cross-check suite behind `oracle-check` and the acceptance
//! gate.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    dense_eig, dense_hessian, dense_sandwich, dense_sandwich_product, exact_delta_variance, fd_gradient, fisher_equality_gap, reference_grad,
    subspace_distance, DenseCurvature,
};
use crate::data::blobs::{self, BlobsConfig};
use crate::delta::{
    lowrank_uncertainty, predict_uncertainty, predict_uncertainty_sandwich, EstimatorKind, SandwichCross,
    SandwichTerms,
};
use crate::nn::{Dataset, Network, NetworkConfig, ParamVector};
use crate::spectral::{
    hessian_topk, lanczos_topk, opg_topk, spectrum_report, CurvatureKind, DenseOperator, LanczosConfig, OpgConfig,
    SpectralBundle,
};
use crate::trainer::{self, TrainConfig};
use crate::{Error, Result};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// A small trained classifier with its data.
#[derive(Debug, Clone)]
pub struct TinyProblem {
    pub network: Network,
    pub params: ParamVector,
    pub train: Dataset,
    pub test: Dataset,
}

/// Trains `layer_sizes` on overlapping Gaussian blobs with full-batch Adam.
pub fn tiny_problem(layer_sizes: &[usize], n_train: usize, n_test: usize, l2_rate: f64, seed: u64) -> Result<TinyProblem> {
    let config = NetworkConfig::new(layer_sizes.to_vec(), l2_rate)?;
    let blob = |n, s| BlobsConfig {
        classes: config.classes(),
        dim: config.input_dim(),
        separation: 3.0,
        noise: 1.0,
        n,
        seed: s,
    };
    let train = blobs::generate(&blob(n_train, seed))?;
    let test = blobs::generate(&blob(n_test, seed.wrapping_add(1)))?;
    let network = Network::new(config)?;
    let cfg = TrainConfig {
        batch_size: n_train,
        schedule: vec![(0, 1e-2), (2000, 1e-3), (4000, 1e-4), (6000, 1e-5)],
        max_steps: 8000,
        seed,
        log_every: 500,
        ..TrainConfig::default()
    };
    let report = trainer::train(&network, &train, None, &cfg)?;
    Ok(TinyProblem {
        network,
        params: report.params,
        train,
        test,
    })
}

pub const TINY_SIZES: [usize; 3] = [8, 3, 3];
pub const TINY_L2: f64 = 0.05;

/// Trains tiny problems from `seed` onward and returns the first whose
/// dense Hessian is positive definite, with its curvature and seed.
pub fn definite_tiny_problem(
    layer_sizes: &[usize],
    n_train: usize,
    n_test: usize,
    l2_rate: f64,
    seed: u64,
    attempts: usize,
) -> Result<(TinyProblem, DenseCurvature, u64)> {
    let mut smallest = f64::INFINITY;
    for s in (0..attempts as u64).map(|i| seed.wrapping_add(i)) {
        let tp = tiny_problem(layer_sizes, n_train, n_test, l2_rate, s)?;
        let curv = DenseCurvature::assemble(&tp.network, &tp.params, &tp.train)?;
        let min = curv.h_eig.0.last().copied().unwrap_or(0.0);
        let max = curv.h_eig.0.first().copied().unwrap_or(0.0);
        if min > 1e-4 * max.abs() {
            return Ok((tp, curv, s));
        }
        smallest = smallest.min(min);
    }
    Err(Error::Invariant(format!(
        "no well conditioned positive definite Hessian in {attempts} seeds, smallest eigenvalue {smallest:e}"
    )))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
        .fold(0.0, f64::max)
}

/// Analytic gradient and Hessian-vector products against central finite
/// differences of an independent evaluator at `points` random parameter
/// vectors. Returns the worst relative errors `(grad, hvp)`.
pub fn gradient_check(layer_sizes: &[usize], points: usize, seed: u64) -> Result<(f64, f64)> {
    let config = NetworkConfig::new(layer_sizes.to_vec(), 0.01)?;
    let network = Network::new(config.clone())?;
    let data = blobs::generate(&BlobsConfig {
        classes: config.classes(),
        dim: config.input_dim(),
        separation: 3.0,
        noise: 1.0,
        n: 40,
        seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for point in 0..points {
        let mut w = ParamVector::init(&config, seed.wrapping_add(point as u64));
        for v in w.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
        let g = network.grad(&w, &data)?;
        let fd = fd_gradient(&config, &w, &data, h)?;
        worst_g = worst_g.max(rel_err(g.as_slice(), &fd));

        let dir: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hv = network.hvp(&w, &data, &dir)?;
        let shifted = |s: f64| {
            let v: Vec<f64> = w.as_slice().iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            reference_grad(&config, &ParamVector::new(v), &data)
        };
        let fd_hv = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        worst_h = worst_h.max(rel_err(hv.as_slice(), fd_hv.as_slice()));
    }
    Ok((worst_g, worst_h))
}

/// Lanczos on a random dense symmetric matrix versus the Jacobi oracle.
pub fn check_lanczos_dense(seed: u64) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(50, 50, |_, _| StandardNormal.sample(&mut rng));
        let a: DMatrix<f64> = (&b + b.transpose()) * 0.5;
        let (oracle, _) = dense_eig(&a)?;
        let r = lanczos_topk(&DenseOperator::new(a), &LanczosConfig::new(10))?;
        let err = max_rel(&r.eigenvalues, &oracle[..10]);
        Ok((err <= 1e-8, format!("max relative eigenvalue error {err:.2e}")))
    };
    CheckOutcome::from_result("lanczos_dense_50", run())
}

/// Lanczos (H) and incremental SVD (G) top-K against the dense oracle.
pub fn check_eigensolvers(tp: &TinyProblem, curv: &DenseCurvature, k: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let hess = || -> Result<(bool, String)> {
        let b = hessian_topk(&tp.network, &tp.params, &tp.train, &LanczosConfig::new(k))?;
        let err = max_rel(&b.eigenvalues, &curv.h_eig.0[..k]);
        let res = b
            .residuals
            .iter()
            .zip(&b.eigenvalues)
            .map(|(r, l)| r / l.abs().max(1.0))
            .fold(0.0, f64::max);
        Ok((
            err <= 1e-6 && res <= 1e-8,
            format!("eigenvalue rel err {err:.2e}, max scaled residual {res:.2e}, S = {}", b.iterations),
        ))
    };
    out.push(CheckOutcome::from_result("hessian_topk_vs_dense", hess()));

    let opg = || -> Result<(bool, String)> {
        let n = tp.train.len();
        let mut bundles = Vec::new();
        for bs in [7, 64, n] {
            let cfg = OpgConfig {
                block_size: bs,
                ..OpgConfig::lossless(k)
            };
            bundles.push(opg_topk(&tp.network, &tp.params, &tp.train, &cfg)?);
        }
        let b = &bundles[0];
        let err = max_rel(&b.eigenvalues, &curv.g_eig.0[..k]);
        // Residuals against the dense G.
        let res = (0..k)
            .map(|i| {
                let q = b.eigenvectors.column(i);
                (&curv.g * q - q * b.eigenvalues[i]).norm() / b.eigenvalues[i].abs().max(1.0)
            })
            .fold(0.0, f64::max);
        let angle = separated_angle(&b.eigenvectors, &curv.g_eig);
        let spread = bundles[1..]
            .iter()
            .map(|o| max_rel(&o.eigenvalues, &b.eigenvalues).max(subspace_distance(&o.eigenvectors, &b.eigenvectors)))
            .fold(0.0, f64::max);
        Ok((
            err <= 1e-8 && res <= 1e-8 && angle <= 1e-6 && spread <= 1e-8,
            format!(
                "eigenvalue rel err {err:.2e}, max scaled residual {res:.2e}, principal angle {angle:.2e}, block-size spread {spread:.2e}"
            ),
        ))
    };
    out.push(CheckOutcome::from_result("opg_topk_vs_dense", opg()));
    out
}

/// Largest principal-angle sine between leading subspaces whose boundary
/// eigenvalue is well separated from the next one.
fn separated_angle(q: &DMatrix<f64>, oracle: &(Vec<f64>, DMatrix<f64>)) -> f64 {
    let (vals, vecs) = oracle;
    let k = q.ncols();
    let sep = 1e-3 * vals[0].abs();
    (1..=k)
        .filter(|&j| j == vals.len() || vals[j - 1] - vals[j] > sep)
        .map(|j| subspace_distance(&q.columns(0, j).into_owned(), &vecs.columns(0, j).into_owned()))
        .fold(0.0, f64::max)
}

/// All three kinds with complete bundles against exact dense variances
/// over the first `inputs` test points. Returns the worst relative error.
pub fn exactness_error(tp: &TinyProblem, curv: &DenseCurvature, inputs: usize) -> Result<f64> {
    let p = curv.param_count();
    let hb = curv.bundle(CurvatureKind::Hessian, p)?;
    let gb = curv.bundle(CurvatureKind::Opg, p)?;
    let cross = SandwichCross::new(&hb, &gb)?;
    let mut worst: f64 = 0.0;
    for i in 0..inputs.min(tp.test.len()) {
        let f = tp.network.sensitivity(&tp.params, tp.test.input(i), tp.test.id(i))?;
        let reports = [
            predict_uncertainty(&hb, &f)?,
            predict_uncertainty(&gb, &f)?,
            predict_uncertainty_sandwich(&hb, &gb, &cross, &f)?,
        ];
        for r in &reports {
            let exact = exact_delta_variance(r.kind, curv, &f.matrix, None)?;
            worst = worst.max(max_rel(&r.variance, &exact));
            let complement: f64 = r.delta.iter().map(|d| d.abs()).sum();
            worst = worst.max(complement / r.variance.iter().sum::<f64>());
        }
    }
    Ok(worst)
}

/// Enclosure of exact variances by `sigma^2 +- delta` and monotonicity of
/// `delta` in K, for OPG and (with the oracle tail clamp) Hessian kinds.
pub fn check_enclosure(tp: &TinyProblem, curv: &DenseCurvature, ks: &[usize], inputs: usize) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let p = curv.param_count();
        let mut bundles: Vec<(usize, SpectralBundle, SpectralBundle)> = Vec::new();
        for &k in ks {
            let hb = hessian_topk(&tp.network, &tp.params, &tp.train, &LanczosConfig::new(k))?;
            let gb = opg_topk(&tp.network, &tp.params, &tp.train, &OpgConfig::lossless(k))?;
            bundles.push((k, hb, gb));
        }
        bundles.push((p, curv.bundle(CurvatureKind::Hessian, p)?, curv.bundle(CurvatureKind::Opg, p)?));
        let (mut violations, mut checked, mut non_monotone) = (0usize, 0usize, 0usize);
        let mut worst_excess: f64 = 0.0;
        for i in 0..inputs.min(tp.test.len()) {
            let f = tp.network.sensitivity(&tp.params, tp.test.input(i), tp.test.id(i))?;
            let mut prev: Option<[Vec<f64>; 2]> = None;
            for (k, hb, gb) in &bundles {
                let rh = predict_uncertainty(hb, &f)?;
                let rg = predict_uncertainty(gb, &f)?;
                if *k < p {
                    let eh = exact_delta_variance(EstimatorKind::Hessian, curv, &f.matrix, Some(*k))?;
                    let eg = exact_delta_variance(EstimatorKind::Opg, curv, &f.matrix, None)?;
                    for (r, e) in [(&rh, &eh), (&rg, &eg)] {
                        for m in 0..e.len() {
                            checked += 1;
                            let excess = (e[m] - r.variance[m]).abs() - r.delta[m];
                            let slack = 1e-9 * r.delta[m] + 1e-10 * r.variance[m];
                            if excess > slack {
                                violations += 1;
                                worst_excess = worst_excess.max(excess / r.variance[m]);
                            }
                        }
                    }
                }
                let now = [rh.delta.clone(), rg.delta.clone()];
                if let Some(before) = &prev {
                    for (b, a) in before.iter().zip(&now) {
                        non_monotone += b.iter().zip(a).filter(|(b, a)| **a > **b * (1.0 + 1e-9) + 1e-300).count();
                    }
                }
                prev = Some(now);
            }
        }
        Ok((
            violations == 0 && non_monotone == 0,
            format!(
                "{violations}/{checked} enclosure violations (worst relative excess {worst_excess:.2e}), {non_monotone} non-monotone delta steps, K = {ks:?} + P"
            ),
        ))
    };
    CheckOutcome::from_result("enclosure", run())
}

/// Every OPG bundle respects the `lambda` floor; the dense `G - lambda I`
/// is PSD.
pub fn check_opg_floor(tp: &TinyProblem, curv: &DenseCurvature, ks: &[usize]) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let lambda = curv.l2_rate;
        let mut min_gap = f64::INFINITY;
        for &k in ks {
            let b = opg_topk(&tp.network, &tp.params, &tp.train, &OpgConfig::new(k))?;
            min_gap = min_gap.min(b.lambda_k() - lambda);
            if spectrum_report(&b).summary.below_l2_rate != 0 {
                return Ok((false, format!("K = {k}: eigenvalue below lambda")));
            }
        }
        let single = tp.train.select(&[0])?;
        let b = opg_topk(&tp.network, &tp.params, &single, &OpgConfig::new(3))?;
        min_gap = min_gap.min(b.lambda_k() - lambda);
        let smallest = curv.g_eig.0.last().copied().unwrap_or(0.0) - lambda;
        Ok((
            min_gap >= -1e-12 && smallest >= -1e-10,
            format!("min(lambda_K - lambda) = {min_gap:.2e}, dense min eig(G - lambda I) = {smallest:.2e}"),
        ))
    };
    CheckOutcome::from_result("opg_floor", run())
}

/// Fisher gap for each `n`, averaged over `seeds`.
pub fn fisher_gaps(ns: &[usize], seeds: &[u64]) -> Result<Vec<f64>> {
    let config = NetworkConfig::new(vec![4, 5, 3], 0.0)?;
    let w = ParamVector::init(&config, 11);
    ns.iter().map(|&n| fisher_equality_gap(&config, &w, n, seeds)).collect()
}

pub fn check_fisher(ns: &[usize], seeds: &[u64]) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let gaps = fisher_gaps(ns, seeds)?;
        let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
        let shown: Vec<String> = ns.iter().zip(&gaps).map(|(n, g)| format!("N={n}: {g:.4}")).collect();
        Ok((decreasing && gaps.iter().all(|g| *g >= 0.0), shown.join(", ")))
    };
    CheckOutcome::from_result("fisher_gap_decreasing", run())
}

/// Factored sandwich versus the literal eight-matrix construction, and the
/// `G = H` collapse. Returns the worst relative errors of factored versus
/// literal (variance and bound), literal versus the explicit product of the
/// linearized matrices, and the collapse.
pub fn sandwich_algebra(layer_sizes: &[usize], k: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let tp = tiny_problem(layer_sizes, 120, 20, 0.01, seed)?;
    let curv = DenseCurvature::assemble(&tp.network, &tp.params, &tp.train)?;
    let hb = curv.bundle(CurvatureKind::Hessian, k)?;
    let gb = curv.bundle(CurvatureKind::Opg, k)?;
    let cross = SandwichCross::new(&hb, &gb)?;
    let same = SpectralBundle::from_eigenpairs(
        CurvatureKind::Opg,
        hb.n,
        hb.l2_rate,
        hb.eigenvalues.clone(),
        hb.eigenvectors.clone(),
        Vec::new(),
        0,
    )?;
    let same_cross = SandwichCross::new(&hb, &same)?;
    let (mut worst_dense, mut worst_product, mut worst_collapse): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..tp.test.len() {
        let f = tp.network.sensitivity(&tp.params, tp.test.input(i), tp.test.id(i))?;
        let (v, d) = SandwichTerms::factored(&hb, &gb, &cross, &f.matrix).combine(&hb, &gb)?;
        let (dv, dd) = dense_sandwich(&hb, &gb, &f.matrix)?;
        for (a, b) in v.iter().chain(&d).zip(dv.iter().chain(&dd)) {
            worst_dense = worst_dense.max((a - b).abs() / b.abs().max(1.0));
        }
        let direct = dense_sandwich_product(&hb, &gb, &f.matrix)?;
        for (a, b) in dv.iter().zip(&direct) {
            worst_product = worst_product.max((a - b).abs() / b.abs().max(1.0));
        }
        let s = predict_uncertainty_sandwich(&hb, &same, &same_cross, &f)?;
        let h = predict_uncertainty(&hb, &f)?;
        for (a, b) in s.variance.iter().zip(&h.variance) {
            worst_collapse = worst_collapse.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok((worst_dense, worst_product, worst_collapse))
}

/// Full-rank variances never fall below their low-rank counterparts.
pub fn check_lowrank(tp: &TinyProblem, k: usize) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let gb = opg_topk(&tp.network, &tp.params, &tp.train, &OpgConfig::new(k))?;
        let mut bad = 0;
        for i in 0..tp.test.len() {
            let f = tp.network.sensitivity(&tp.params, tp.test.input(i), tp.test.id(i))?;
            let full = predict_uncertainty(&gb, &f)?;
            let low = lowrank_uncertainty(&gb, &f)?;
            bad += full.variance.iter().zip(&low).filter(|(a, b)| a < b).count();
        }
        Ok((bad == 0, format!("{bad} entries with full-rank < low-rank")))
    };
    CheckOutcome::from_result("full_rank_dominates_low_rank", run())
}

/// The Hessian of an untrained net has negative eigenvalues.
pub fn check_untrained_indefinite(seed: u64) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let config = NetworkConfig::new(vec![6, 14, 4], 0.01)?;
        let network = Network::new(config.clone())?;
        let data = blobs::generate(&BlobsConfig {
            classes: 4,
            dim: 6,
            separation: 3.0,
            noise: 1.0,
            n: 100,
            seed,
        })?;
        let mut w = ParamVector::init(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in w.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.5 * z;
        }
        let h = dense_hessian(&network, &w, &data)?;
        let (vals, vecs) = dense_eig(&h)?;
        let full = SpectralBundle::from_eigenpairs(
            CurvatureKind::Hessian,
            data.len(),
            0.01,
            vals.clone(),
            vecs,
            Vec::new(),
            0,
        )?;
        let negative = spectrum_report(&full).summary.negative;
        Ok((negative > 0, format!("{negative} negative of {} eigenvalues", vals.len())))
    };
    CheckOutcome::from_result("untrained_hessian_indefinite", run())
}

fn default_fisher_ns() -> Vec<usize> {
    vec![100, 1000, 10000]
}

fn default_fisher_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fisher_ns")]
    pub fisher_ns: Vec<usize>,
    #[serde(default = "default_fisher_seeds")]
    pub fisher_seeds: usize,
    /// Bundle files to validate in addition to the numerical checks.
    #[serde(default)]
    pub bundles: Vec<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fisher_ns: default_fisher_ns(),
            fisher_seeds: default_fisher_seeds(),
            bundles: Vec::new(),
        }
    }
}

/// Runs every cross-check at oracle scale.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let seed = cfg.seed;
    out.push(CheckOutcome::from_result(
        "gradient_hvp_fd",
        gradient_check(&[6, 14, 4], 5, seed).map(|(g, h)| {
            (g <= 1e-5 && h <= 1e-5, format!("grad rel err {g:.2e}, hvp rel err {h:.2e}"))
        }),
    ));
    out.push(check_lanczos_dense(seed));
    match definite_tiny_problem(&TINY_SIZES, 300, 50, TINY_L2, seed, 16) {
        Ok((tp, curv, s)) => {
            out.push(CheckOutcome::new(
                "tiny_problem",
                true,
                format!("seed {s}, P = {}, min eig(H) {:.3e}", curv.param_count(), curv.h_eig.0.last().unwrap()),
            ));
            out.extend(check_eigensolvers(&tp, &curv, 20));
            out.push(CheckOutcome::from_result(
                "k_equals_p_exactness",
                exactness_error(&tp, &curv, 50).map(|e| (e <= 1e-8, format!("max relative error {e:.2e}"))),
            ));
            out.push(check_enclosure(&tp, &curv, &[5, 10, 20], 50));
            out.push(check_opg_floor(&tp, &curv, &[5, 10, 20]));
            out.push(check_lowrank(&tp, 10));
        }
        Err(e) => out.push(CheckOutcome::new("tiny_problem", false, format!("error: {e}"))),
    }
    out.push(CheckOutcome::from_result(
        "sandwich_algebra",
        sandwich_algebra(&[5, 5, 5], 10, seed).map(|(d, p, c)| {
            (
                d <= 1e-10 && p <= 1e-10 && c <= 1e-10,
                format!("factored vs literal {d:.2e}, literal vs product {p:.2e}, G=H collapse {c:.2e}"),
            )
        }),
    ));
    out.push(check_untrained_indefinite(seed));
    let seeds: Vec<u64> = (0..cfg.fisher_seeds as u64).map(|s| seed.wrapping_add(s)).collect();
    out.push(check_fisher(&cfg.fisher_ns, &seeds));
    for path in &cfg.bundles {
        let name = format!("bundle {}", path.display());
        out.push(match SpectralBundle::load(path) {
            Ok(b) => CheckOutcome::new(&name, true, format!("{} bundle, K = {}", b.kind.as_str(), b.k())),
            Err(e) => CheckOutcome::new(&name, false, e.to_string()),
        });
    }
    out
}
