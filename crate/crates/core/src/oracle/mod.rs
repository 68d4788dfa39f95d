//! Dense brute-force references for small networks: explicit curvature
//! matrices, a Jacobi eigensolver and exact Delta-method variances.
//!
//! Gradients here come from a separate matrix-based evaluator so that the
//! quantities checked against the main path are not computed by it.

pub mod suite;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};

use crate::delta::EstimatorKind;
use crate::nn::{Dataset, Network, NetworkConfig, ParamVector};
use crate::spectral::{CurvatureKind, SpectralBundle};
use crate::{Error, Result};

pub use suite::{
    definite_tiny_problem, run_suite, tiny_problem, CheckOutcome, SuiteConfig, TinyProblem, TINY_L2, TINY_SIZES,
};

/// Largest `P` the dense oracles accept.
pub const ORACLE_GUARD: usize = 2000;

fn guard(p: usize) -> Result<()> {
    if p > ORACLE_GUARD {
        return Err(Error::OracleGuard {
            order: p,
            limit: ORACLE_GUARD,
        });
    }
    Ok(())
}

/// Per-layer `(W, b)` with `W` of shape `fan_out x fan_in`.
fn layers(config: &NetworkConfig, w: &ParamVector) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    w.check_len(config)?;
    let ws = w.as_slice();
    Ok(config
        .layout()
        .iter()
        .map(|l| {
            let weights = DMatrix::from_row_slice(l.fan_out, l.fan_in, &ws[l.weight_offset..l.bias_offset]);
            let bias = DVector::from_column_slice(&ws[l.bias_offset..l.end()]);
            (weights, bias)
        })
        .collect())
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Pre-activations and activations of every layer; `acts[0]` is the input.
fn trace(ls: &[(DMatrix<f64>, DVector<f64>)], x: &[f64]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut acts = vec![DVector::from_column_slice(x)];
    let mut pres = Vec::with_capacity(ls.len());
    for (i, (wm, b)) in ls.iter().enumerate() {
        let z = wm * acts.last().expect("input") + b;
        let a = if i + 1 == ls.len() { softmax(&z) } else { z.map(|v| v.max(0.0)) };
        pres.push(z);
        acts.push(a);
    }
    (pres, acts)
}

/// Backpropagates `dL/dz` of the output layer into a flat gradient.
fn pullback(
    ls: &[(DMatrix<f64>, DVector<f64>)],
    pres: &[DVector<f64>],
    acts: &[DVector<f64>],
    mut delta: DVector<f64>,
) -> DVector<f64> {
    let mut blocks: Vec<DVector<f64>> = Vec::with_capacity(2 * ls.len());
    for l in (0..ls.len()).rev() {
        let gw = &delta * acts[l].transpose();
        // Row-major weight block, then bias.
        blocks.push(delta.clone());
        blocks.push(DVector::from_iterator(gw.len(), gw.transpose().iter().copied()));
        if l > 0 {
            let back = ls[l].0.transpose() * &delta;
            delta = back.zip_map(&pres[l - 1], |g, z| if z > 0.0 { g } else { 0.0 });
        }
    }
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(total, blocks.iter().rev().flat_map(|b| b.iter().copied()))
}

/// Class probabilities by the reference evaluator.
pub fn reference_probs(config: &NetworkConfig, w: &ParamVector, x: &[f64]) -> Result<DVector<f64>> {
    let ls = layers(config, w)?;
    Ok(trace(&ls, x).1.pop().expect("output"))
}

/// Data-term gradient of one example's cross-entropy.
pub fn reference_example_grad(config: &NetworkConfig, w: &ParamVector, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
    let ls = layers(config, w)?;
    let (pres, acts) = trace(&ls, x);
    let delta = acts.last().expect("output") - DVector::from_column_slice(y);
    Ok(pullback(&ls, &pres, &acts, delta))
}

/// Jacobian of the class probabilities, `classes x P`.
pub fn reference_sensitivity(config: &NetworkConfig, w: &ParamVector, x: &[f64]) -> Result<DMatrix<f64>> {
    let ls = layers(config, w)?;
    let (pres, acts) = trace(&ls, x);
    let p = acts.last().expect("output");
    let k = p.len();
    let jac = DMatrix::from_fn(k, k, |i, m| p[i] * (if i == m { 1.0 } else { 0.0 } - p[m]));
    let rows: Vec<DVector<f64>> = (0..k)
        .map(|i| pullback(&ls, &pres, &acts, jac.row(i).transpose()))
        .collect();
    Ok(DMatrix::from_fn(k, config.param_count(), |i, c| rows[i][c]))
}

/// Full regularized cost by the reference evaluator.
pub fn reference_cost(config: &NetworkConfig, w: &ParamVector, data: &Dataset) -> Result<f64> {
    let ls = layers(config, w)?;
    let mut total = 0.0;
    for n in 0..data.len() {
        let (pres, _) = trace(&ls, data.input(n));
        let z = pres.last().expect("output");
        let max = z.max();
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let y = data.target(n);
        total += z.iter().zip(y).map(|(zi, yi)| yi * (lse - zi)).sum::<f64>();
    }
    Ok(total / data.len() as f64 + 0.5 * config.l2_rate * w.norm_squared())
}

/// Full regularized gradient by the reference evaluator.
pub fn reference_grad(config: &NetworkConfig, w: &ParamVector, data: &Dataset) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(config.param_count());
    for n in 0..data.len() {
        g += reference_example_grad(config, w, data.input(n), data.target(n))?;
    }
    g /= data.len() as f64;
    Ok(g + DVector::from_column_slice(w.as_slice()) * config.l2_rate)
}

/// Central finite-difference gradient of the reference cost.
pub fn fd_gradient(config: &NetworkConfig, w: &ParamVector, data: &Dataset, h: f64) -> Result<Vec<f64>> {
    let mut probe = w.clone();
    (0..w.len())
        .map(|j| {
            let orig = probe.as_slice()[j];
            probe.as_mut_slice()[j] = orig + h;
            let up = reference_cost(config, &probe, data)?;
            probe.as_mut_slice()[j] = orig - h;
            let down = reference_cost(config, &probe, data)?;
            probe.as_mut_slice()[j] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Regularized Hessian assembled column by column from Hessian-vector
/// products with unit vectors, then symmetrized.
pub fn dense_hessian(network: &Network, w: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let p = network.param_count();
    guard(p)?;
    let mut h = DMatrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = network.hvp(w, data, &e)?;
        h.column_mut(j).copy_from_slice(col.as_slice());
        e[j] = 0.0;
    }
    symmetrize(h, 1e-9)
}

/// Hessian by central differences of the reference gradient.
pub fn fd_hessian(config: &NetworkConfig, w: &ParamVector, data: &Dataset, step: f64) -> Result<DMatrix<f64>> {
    let p = config.param_count();
    guard(p)?;
    let mut h = DMatrix::zeros(p, p);
    let mut probe = w.clone();
    for j in 0..p {
        let orig = probe.as_slice()[j];
        probe.as_mut_slice()[j] = orig + step;
        let up = reference_grad(config, &probe, data)?;
        probe.as_mut_slice()[j] = orig - step;
        let down = reference_grad(config, &probe, data)?;
        probe.as_mut_slice()[j] = orig;
        h.set_column(j, &((up - down) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// `(1/N) sum g g^T` over per-example data gradients, without the shift.
pub fn dense_data_opg(config: &NetworkConfig, w: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let p = config.param_count();
    guard(p)?;
    let mut g = DMatrix::zeros(p, p);
    for n in 0..data.len() {
        let gn = reference_example_grad(config, w, data.input(n), data.target(n))?;
        g.syger(1.0, &gn, &gn, 1.0);
    }
    g /= data.len() as f64;
    g.fill_upper_triangle_with_lower_triangle();
    Ok(g)
}

/// `G = (1/N) sum g g^T + lambda I`.
pub fn dense_opg(config: &NetworkConfig, w: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let mut g = dense_data_opg(config, w, data)?;
    for i in 0..g.nrows() {
        g[(i, i)] += config.l2_rate;
    }
    Ok(g)
}

fn max_asym(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax() / a.amax().max(1.0)
}

fn symmetrize(a: DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let asymmetry = max_asym(&a);
    if asymmetry > tol {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok((&a + a.transpose()) * 0.5)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Eigenvalues are descending; eigenvectors are the columns.
pub fn dense_eig(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::Dimension {
            what: "eigen input columns",
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    let n = a.nrows();
    guard(n)?;
    let asymmetry = max_asym(a);
    if asymmetry > 1e-10 {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(y, y)].total_cmp(&m[(x, x)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Dense `H`, `G` and their eigendecompositions at fixed parameters.
#[derive(Debug, Clone)]
pub struct DenseCurvature {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h_eig: (Vec<f64>, DMatrix<f64>),
    pub g_eig: (Vec<f64>, DMatrix<f64>),
    pub l2_rate: f64,
    pub n: usize,
}

impl DenseCurvature {
    pub fn assemble(network: &Network, w: &ParamVector, data: &Dataset) -> Result<Self> {
        let h = dense_hessian(network, w, data)?;
        let g = dense_opg(network.config(), w, data)?;
        let h_eig = dense_eig(&h)?;
        let g_eig = dense_eig(&g)?;
        Ok(Self {
            h,
            g,
            h_eig,
            g_eig,
            l2_rate: network.l2_rate(),
            n: data.len(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.h.nrows()
    }

    /// Top-`k` eigenpairs packaged as a bundle; `k = P` gives a complete one.
    pub fn bundle(&self, kind: CurvatureKind, k: usize) -> Result<SpectralBundle> {
        let (values, vectors) = match kind {
            CurvatureKind::Hessian => &self.h_eig,
            CurvatureKind::Opg => &self.g_eig,
        };
        if k == 0 || k > values.len() {
            return Err(Error::Config(format!("bundle rank {k} outside 1..={}", values.len())));
        }
        SpectralBundle::from_eigenpairs(
            kind,
            self.n,
            self.l2_rate,
            values[..k].to_vec(),
            vectors.columns(0, k).into_owned(),
            Vec::new(),
            0,
        )
    }

    /// `H^{-1}` with eigenvalues past `tail_from` projected onto
    /// `[lambda, lambda_K]`, where `lambda_K` is eigenvalue `tail_from - 1`.
    fn inverse_hessian(&self, tail_from: Option<usize>) -> Result<DMatrix<f64>> {
        let (values, q) = &self.h_eig;
        let mut vals = values.clone();
        if let Some(k) = tail_from.filter(|&k| k > 0 && k < vals.len()) {
            let hi = vals[k - 1].max(self.l2_rate);
            for v in &mut vals[k..] {
                *v = v.clamp(self.l2_rate, hi);
            }
        } else if tail_from.is_none() {
            // Independent of the eigensolver when no clamp is requested.
            return self
                .h
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::Singular {
                    smallest: *vals.last().expect("nonempty"),
                });
        }
        let smallest = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if !(smallest > 0.0) {
            return Err(Error::Singular { smallest });
        }
        let mut scaled = q.clone();
        for (mut col, v) in scaled.column_iter_mut().zip(&vals) {
            col /= *v;
        }
        Ok(scaled * q.transpose())
    }

    fn inverse_opg(&self) -> Result<DMatrix<f64>> {
        self.g
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Singular {
                smallest: *self.g_eig.0.last().expect("nonempty"),
            })
    }
}

/// Exact `diag(F Sigma F^T)` for the chosen covariance, including `1/N`.
///
/// `tail_from = Some(K)` clamps the Hessian's eigenvalues beyond the first
/// `K` onto `[lambda, lambda_K]` before inverting.
pub fn exact_delta_variance(
    kind: EstimatorKind,
    curv: &DenseCurvature,
    f: &DMatrix<f64>,
    tail_from: Option<usize>,
) -> Result<Vec<f64>> {
    if f.ncols() != curv.param_count() {
        return Err(Error::Dimension {
            what: "sensitivity columns",
            expected: curv.param_count(),
            actual: f.ncols(),
        });
    }
    let sigma = match kind {
        EstimatorKind::Hessian => curv.inverse_hessian(tail_from)?,
        EstimatorKind::Opg => curv.inverse_opg()?,
        EstimatorKind::Sandwich => {
            let hi = curv.inverse_hessian(tail_from)?;
            &hi * &curv.g * &hi
        }
    };
    let fs = f * sigma;
    let inv_n = 1.0 / curv.n as f64;
    Ok((0..f.nrows()).map(|m| inv_n * fs.row(m).dot(&f.row(m))).collect())
}

/// The sandwich `(sigma^2, delta)` built from the eight `P x P` matrices
/// written out literally.
pub fn dense_sandwich(hb: &SpectralBundle, gb: &SpectralBundle, f: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = hb.param_count();
    guard(p)?;
    let (tilde_h, _) = hb.linearized()?;
    let (tilde_g, _) = gb.linearized()?;
    let eye = DMatrix::<f64>::identity(p, p);
    let qh = &hb.eigenvectors;
    let qg = &gb.eigenvectors;
    let hinv = qh * DMatrix::from_diagonal(&DVector::from_iterator(hb.k(), hb.eigenvalues.iter().map(|v| 1.0 / v))) * qh.transpose();
    let gl = qg * DMatrix::from_diagonal(&DVector::from_column_slice(&gb.eigenvalues)) * qg.transpose();
    let ph = &eye - qh * qh.transpose();
    let pg = &eye - qg * qg.transpose();

    let s = &hinv * &gl * &hinv;
    let a = &hinv * &pg * &hinv;
    let n = &ph * &gl * &hinv;
    let d = &ph * &pg * &hinv;
    let w = &hinv * &gl * &ph;
    // Written with its last two factors swapped in the source; as printed
    // it is identically zero, while the stated identity is D^T.
    let i = &hinv * &pg * &ph;
    let c = &ph * &gl * &ph;
    let hh = &ph * &pg * &ph;

    let (lambda, kh, kg) = (hb.l2_rate, hb.lambda_k(), gb.lambda_k());
    let (g, h) = (tilde_g, 1.0 / tilde_h);
    let inv_n = 1.0 / hb.n as f64;
    let total = (&s + &a * g + (&n + &w) * h + (&d + &i) * (g * h) + &c * (h * h) + &hh * (g * h * h)) * inv_n;
    let bound = (&a * (kg - lambda)
        + (&n + &w) * (1.0 / lambda - 1.0 / kh)
        + (&d + &i) * (kg / lambda - lambda / kh)
        + &c * (1.0 / (lambda * lambda) - 1.0 / (kh * kh))
        + &hh * (kg / (lambda * lambda) - lambda / (kh * kh)))
        * (0.5 * inv_n);
    let diag = |m: &DMatrix<f64>| -> Vec<f64> {
        let fm = f * m;
        (0..f.nrows()).map(|r| fm.row(r).dot(&f.row(r))).collect()
    };
    Ok((diag(&total), diag(&bound)))
}

/// `diag(F Ht^{-1} Gt Ht^{-1} F^T) / N` with the linearized `Ht^{-1}` and
/// `Gt` formed explicitly.
pub fn dense_sandwich_product(hb: &SpectralBundle, gb: &SpectralBundle, f: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = hb.param_count();
    guard(p)?;
    let (tilde_h, _) = hb.linearized()?;
    let (tilde_g, _) = gb.linearized()?;
    let eye = DMatrix::<f64>::identity(p, p);
    let approx = |b: &SpectralBundle, map: &dyn Fn(f64) -> f64, tail: f64| {
        let d = DMatrix::from_diagonal(&DVector::from_iterator(b.k(), b.eigenvalues.iter().map(|&v| map(v))));
        let q = &b.eigenvectors;
        q * d * q.transpose() + (&eye - q * q.transpose()) * tail
    };
    let hinv = approx(hb, &|v| 1.0 / v, 1.0 / tilde_h);
    let g = approx(gb, &|v| v, tilde_g);
    let fs = f * (&hinv * g * &hinv);
    let inv_n = 1.0 / hb.n as f64;
    Ok((0..f.nrows()).map(|r| inv_n * fs.row(r).dot(&f.row(r))).collect())
}

/// Mean over seeds of `|H_data - G_data|_F / |H_data|_F` on `n` standard
/// normal inputs whose labels are drawn from the model's own predictive
/// distribution at `w`.
pub fn fisher_equality_gap(config: &NetworkConfig, w: &ParamVector, n: usize, seeds: &[u64]) -> Result<f64> {
    let p = config.param_count();
    guard(p)?;
    if seeds.is_empty() || n == 0 {
        return Err(Error::Config("fisher gap needs seeds and N > 0".into()));
    }
    let data_config = config.with_l2_rate(0.0);
    let network = Network::new(data_config.clone())?;
    let dim = config.input_dim();
    let mut total = 0.0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let probs = reference_probs(config, w, &x)?;
            let pick = WeightedIndex::new(probs.iter().copied())
                .map_err(|e| Error::Invariant(format!("bad predictive distribution: {e}")))?;
            labels.push(pick.sample(&mut rng));
            inputs.extend(x);
        }
        let data = Dataset::from_labels(dim, config.classes(), inputs, &labels)?;
        let h = dense_hessian(&network, w, &data)?;
        let g = dense_data_opg(&data_config, w, &data)?;
        total += (&h - &g).norm() / h.norm();
    }
    Ok(total / seeds.len() as f64)
}

/// Sine of the largest principal angle between the column spans of two
/// orthonormal bases of equal width, `|(I - A A^T) B|_2`.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let resid = b - a * (a.transpose() * b);
    resid.singular_values().max()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_problem(sizes: Vec<usize>, n: usize, seed: u64) -> (Network, ParamVector, Dataset) {
        let config = NetworkConfig::new(sizes, 0.01).unwrap();
        let w = ParamVector::init(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let dim = config.input_dim();
        let inputs: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % config.classes()).collect();
        let data = Dataset::from_labels(dim, config.classes(), inputs, &labels).unwrap();
        (Network::new(config).unwrap(), w, data)
    }

    #[test]
    fn jacobi_small_cases() {
        let (v, q) = dense_eig(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(v, vec![1.0; 4]);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).amax() < 1e-15);
        let (v, _) = dense_eig(&DMatrix::from_diagonal(&DVector::from_column_slice(&[3.0, 1.0, 2.0]))).unwrap();
        assert_eq!(v, vec![3.0, 2.0, 1.0]);
        assert!(matches!(
            dense_eig(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(30, 30, |_, _| StandardNormal.sample(&mut rng));
        let a: DMatrix<f64> = &b + b.transpose();
        let (v, q) = dense_eig(&a).unwrap();
        let rec = &q * DMatrix::from_diagonal(&DVector::from_column_slice(&v)) * q.transpose();
        assert!((&rec - &a).norm() <= 1e-8 * a.norm());
        assert!((q.transpose() * &q - DMatrix::identity(30, 30)).amax() <= 1e-10);
        let mut reference: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
        reference.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in v.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn reference_matches_main_path() {
        let (net, w, data) = random_problem(vec![4, 6, 3], 10, 1);
        let cfg = net.config();
        let g = reference_grad(cfg, &w, &data).unwrap();
        let main = net.grad(&w, &data).unwrap();
        assert!((g - DVector::from_column_slice(main.as_slice())).amax() < 1e-13);
        let c = reference_cost(cfg, &w, &data).unwrap();
        assert!((c - net.cost(&w, &data).unwrap()).abs() < 1e-13);
        let s = reference_sensitivity(cfg, &w, data.input(0)).unwrap();
        let main = net.sensitivity(&w, data.input(0), 0).unwrap();
        assert!((s - main.matrix).amax() < 1e-14);
    }

    #[test]
    fn dense_hessian_matches_finite_differences() {
        let (net, w, data) = random_problem(vec![3, 5, 3], 12, 2);
        let h = dense_hessian(&net, &w, &data).unwrap();
        let fd = fd_hessian(net.config(), &w, &data, 1e-5).unwrap();
        assert!((&h - &fd).amax() <= 1e-5 * h.amax().max(1.0));
    }

    #[test]
    fn l2_shift_is_exact() {
        let (net, w, data) = random_problem(vec![3, 4, 2], 8, 3);
        let a = 0.37;
        let ha = dense_hessian(&Network::new(net.config().with_l2_rate(a)).unwrap(), &w, &data).unwrap();
        let h0 = dense_hessian(&Network::new(net.config().with_l2_rate(0.0)).unwrap(), &w, &data).unwrap();
        let diff = ha - h0;
        assert!((diff - DMatrix::identity(w.len(), w.len()) * a).amax() < 1e-15);
    }

    #[test]
    fn linear_softmax_hessian_is_convex() {
        let (net, w, data) = random_problem(vec![4, 3], 15, 4);
        let h = dense_hessian(&net, &w, &data).unwrap();
        let (v, _) = dense_eig(&h).unwrap();
        assert!(v.iter().all(|&x| x >= 0.01 - 1e-10));
    }

    #[test]
    fn opg_single_example_is_rank_one_plus_shift() {
        let (net, w, data) = random_problem(vec![3, 4, 2], 1, 5);
        let g = dense_opg(net.config(), &w, &data).unwrap();
        let (v, _) = dense_eig(&g).unwrap();
        assert!(v[0] > 0.01 + 1e-6);
        assert!(v[1..].iter().all(|&x| (x - 0.01).abs() < 1e-12));
    }

    #[test]
    fn coordinate_sensitivity_reads_diagonal() {
        let (net, w, data) = random_problem(vec![3, 3, 2], 20, 6);
        let curv = DenseCurvature::assemble(&net, &w, &data).unwrap();
        let mut f = DMatrix::zeros(2, w.len());
        f[(0, 2)] = 1.0;
        f[(1, 5)] = 1.0;
        let var = exact_delta_variance(EstimatorKind::Opg, &curv, &f, None).unwrap();
        let ginv = curv.g.clone().try_inverse().unwrap();
        assert!((var[0] - ginv[(2, 2)] / 20.0).abs() < 1e-12 * var[0]);
        assert!((var[1] - ginv[(5, 5)] / 20.0).abs() < 1e-12 * var[1]);
    }

    #[test]
    fn sandwich_with_g_equal_h_is_hessian() {
        let (net, w, data) = random_problem(vec![3, 2], 30, 7);
        let mut curv = DenseCurvature::assemble(&net, &w, &data).unwrap();
        curv.g = curv.h.clone();
        let f = reference_sensitivity(net.config(), &w, data.input(0)).unwrap();
        let s = exact_delta_variance(EstimatorKind::Sandwich, &curv, &f, None).unwrap();
        let h = exact_delta_variance(EstimatorKind::Hessian, &curv, &f, None).unwrap();
        for (a, b) in s.iter().zip(&h) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn guard_rejects_large_p() {
        let config = NetworkConfig::new(vec![100, 20, 2], 0.01).unwrap();
        let w = ParamVector::init(&config, 0);
        assert!(matches!(
            fisher_equality_gap(&config, &w, 10, &[0]),
            Err(Error::OracleGuard { .. })
        ));
    }
}
