use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{axpy, dot, norm, LinearOperator};
use crate::{Error, Result};

fn default_tol() -> f64 {
    1e-8
}
fn default_check_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanczosConfig {
    pub k: usize,
    /// Iteration budget; defaults to `min(P, 10 K)`.
    #[serde(default)]
    pub max_iters: Option<usize>,
    /// Accept a Ritz pair once `|A q - theta q| <= tol * max(1, |theta|)`.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

impl LanczosConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: None,
            tol: default_tol(),
            seed: 0,
            check_every: default_check_every(),
        }
    }
}

/// Ritz pairs in descending eigenvalue order with their true residual norms.
#[derive(Debug, Clone, PartialEq)]
pub struct LanczosResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Eigenpairs of the tridiagonal matrix, sorted by descending eigenvalue.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let j = alpha.len();
    let mut t = DMatrix::zeros(j, j);
    for i in 0..j {
        t[(i, i)] = alpha[i];
        if i + 1 < j {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(j, j, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes of classical Gram-Schmidt.
    for _ in 0..2 {
        for q in basis {
            let c = dot(w, q);
            axpy(-c, q, w);
        }
    }
}

/// The `k` algebraically largest eigenpairs of a symmetric operator by
/// Lanczos iteration with full reorthogonalization.
///
/// Convergence is tested every `check_every` iterations with the usual
/// `|beta_j y_j|` estimate and then confirmed with true residuals. On an
/// invariant subspace the recurrence restarts from a fresh random vector
/// orthogonal to the current basis.
///
/// A single Krylov sequence sees only one copy of a repeated eigenvalue, so
/// the converged set is then verified: a top-1 run on the operator deflated
/// against the found vectors must not exceed the K-th value. Any pair that
/// does is merged in and the check repeats.
pub fn lanczos_topk(op: &dyn LinearOperator, cfg: &LanczosConfig) -> Result<LanczosResult> {
    let p = op.dim();
    let k = cfg.k;
    if k == 0 || k >= p {
        return Err(Error::Config(format!("lanczos needs 0 < K < P, got K={k}, P={p}")));
    }
    if !(cfg.tol > 0.0) || cfg.check_every == 0 {
        return Err(Error::Config("lanczos tol and check_every must be positive".into()));
    }
    let max_iters = cfg.max_iters.unwrap_or((10 * k).min(p)).clamp(k, p);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut result = krylov_topk(op, k, &[], max_iters, cfg, &mut rng)?;

    let mut rounds = 0;
    while p - k >= 2 && rounds < k {
        rounds += 1;
        let locked: Vec<Vec<f64>> = result.eigenvectors.column_iter().map(|c| c.iter().copied().collect()).collect();
        let extra = krylov_topk(op, 1, &locked, max_iters.min(p - k), cfg, &mut rng).map_err(|e| match e {
            Error::NotConverged { iterations, max_residual, .. } => Error::NotConverged {
                iterations: result.iterations + iterations,
                max_residual,
                partial: Box::new(result.clone()),
            },
            other => other,
        })?;
        result.iterations += extra.iterations;
        let theta_k = result.eigenvalues[k - 1];
        if extra.eigenvalues[0] <= theta_k + cfg.tol * theta_k.abs().max(1.0) {
            break;
        }
        let mut pairs: Vec<(f64, Vec<f64>, f64)> = (0..k)
            .map(|i| (result.eigenvalues[i], locked[i].clone(), result.residuals[i]))
            .collect();
        let mut q: Vec<f64> = extra.eigenvectors.column(0).iter().copied().collect();
        orthogonalize(&mut q, &locked);
        let n = norm(&q);
        q.iter_mut().for_each(|x| *x /= n);
        let mut aq = vec![0.0; p];
        op.apply(&q, &mut aq);
        let theta = dot(&q, &aq);
        axpy(-theta, &q, &mut aq);
        pairs.push((theta, q, norm(&aq)));
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs.truncate(k);
        result.eigenvalues = pairs.iter().map(|t| t.0).collect();
        result.residuals = pairs.iter().map(|t| t.2).collect();
        result.eigenvectors = DMatrix::from_fn(p, k, |r, c| pairs[c].1[r]);
    }
    Ok(result)
}

/// Lanczos on the operator restricted to the orthogonal complement of
/// `locked`.
fn krylov_topk(
    op: &dyn LinearOperator,
    k: usize,
    locked: &[Vec<f64>],
    max_iters: usize,
    cfg: &LanczosConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LanczosResult> {
    let p = op.dim();
    let unit_in_complement = |basis: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut v = random_unit(p, rng);
        orthogonalize(&mut v, locked);
        orthogonalize(&mut v, basis);
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    basis.push(unit_in_complement(&basis, rng));
    let mut alpha: Vec<f64> = Vec::with_capacity(max_iters);
    let mut beta: Vec<f64> = Vec::with_capacity(max_iters);
    let mut w = vec![0.0; p];
    let mut scale: f64 = 0.0;

    for j in 0..max_iters {
        op.apply(&basis[j], &mut w);
        let a = dot(&w, &basis[j]);
        axpy(-a, &basis[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        orthogonalize(&mut w, locked);
        orthogonalize(&mut w, &basis);
        let b = norm(&w);
        alpha.push(a);
        scale = scale.max(a.abs()).max(b);
        let iters = j + 1;

        let due = iters % cfg.check_every == 0 || iters == max_iters;
        if iters >= k && due {
            let (theta, y) = tridiagonal_eigen(&alpha, &beta);
            let estimates_ok = (0..k).all(|i| (b * y[(iters - 1, i)]).abs() <= cfg.tol * theta[i].abs().max(1.0));
            if estimates_ok || iters == max_iters {
                let result = ritz_pairs(op, &basis, &theta, &y, k, iters);
                let worst = result
                    .residuals
                    .iter()
                    .zip(&result.eigenvalues)
                    .map(|(r, t)| r / t.abs().max(1.0))
                    .fold(0.0, f64::max);
                if worst <= cfg.tol {
                    return Ok(result);
                }
                if iters == max_iters {
                    return Err(Error::NotConverged {
                        iterations: iters,
                        max_residual: worst,
                        partial: Box::new(result),
                    });
                }
            }
        }
        if iters == max_iters {
            break;
        }

        if b <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            beta.push(0.0);
            basis.push(unit_in_complement(&basis, rng));
        } else {
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
    }
    unreachable!("loop returns at max_iters")
}

fn ritz_pairs(
    op: &dyn LinearOperator,
    basis: &[Vec<f64>],
    theta: &[f64],
    y: &DMatrix<f64>,
    k: usize,
    iters: usize,
) -> LanczosResult {
    let p = op.dim();
    let mut vectors = DMatrix::zeros(p, k);
    let mut residuals = Vec::with_capacity(k);
    let mut aq = vec![0.0; p];
    for i in 0..k {
        let mut q = vec![0.0; p];
        for (t, v) in basis.iter().take(iters).enumerate() {
            axpy(y[(t, i)], v, &mut q);
        }
        let n = norm(&q);
        q.iter_mut().for_each(|x| *x /= n);
        op.apply(&q, &mut aq);
        axpy(-theta[i], &q, &mut aq);
        residuals.push(norm(&aq));
        vectors.column_mut(i).copy_from_slice(&q);
    }
    LanczosResult {
        eigenvalues: theta[..k].to_vec(),
        eigenvectors: vectors,
        residuals,
        iterations: iters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::DenseOperator;

    #[test]
    fn diagonal_operator_top_three() {
        let diag: Vec<f64> = (1..=10).map(f64::from).collect();
        let op = DenseOperator::diagonal(&diag);
        let r = lanczos_topk(&op, &LanczosConfig::new(3)).unwrap();
        for (got, want) in r.eigenvalues.iter().zip([10.0, 9.0, 8.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        for (i, coord) in [9, 8, 7].into_iter().enumerate() {
            assert!((r.eigenvectors[(coord, i)].abs() - 1.0).abs() < 1e-8);
        }
        assert!(r.residuals.iter().all(|&res| res <= 1e-8 * 10.0));
    }

    #[test]
    fn handles_invariant_subspace_restart() {
        // Repeated eigenvalues force a breakdown before K distinct pairs.
        let diag = [5.0, 5.0, 5.0, 1.0, 1.0, 1.0];
        let op = DenseOperator::diagonal(&diag);
        let r = lanczos_topk(&op, &LanczosConfig::new(4)).unwrap();
        for (got, want) in r.eigenvalues.iter().zip([5.0, 5.0, 5.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{:?}", r.eigenvalues);
        }
        let gram = r.eigenvectors.transpose() * &r.eigenvectors;
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn recovers_every_copy_of_a_repeated_eigenvalue() {
        let mut diag: Vec<f64> = (0..40).map(|i| 0.1 + 0.01 * i as f64).collect();
        diag[..6].iter_mut().for_each(|d| *d = 2.0);
        diag[6] = 3.0;
        diag[7] = 1.5;
        diag[8] = 1.5;
        let op = DenseOperator::diagonal(&diag);
        let r = lanczos_topk(&op, &LanczosConfig::new(10)).unwrap();
        let want = [3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 1.5, 1.5, 0.49];
        for (got, want) in r.eigenvalues.iter().zip(want) {
            assert!((got - want).abs() < 1e-10, "{:?}", r.eigenvalues);
        }
        let gram = r.eigenvectors.transpose() * &r.eigenvectors;
        assert!((gram - DMatrix::identity(10, 10)).amax() < 1e-10);
        assert!(r.residuals.iter().all(|&res| res <= 1e-8 * 3.0));
    }

    #[test]
    fn rejects_bad_k() {
        let op = DenseOperator::diagonal(&[1.0, 2.0]);
        assert!(lanczos_topk(&op, &LanczosConfig::new(2)).is_err());
        assert!(lanczos_topk(&op, &LanczosConfig::new(0)).is_err());
    }

    #[test]
    fn reports_non_convergence_with_partial_results() {
        let diag: Vec<f64> = (0..200).map(|i| 1.0 + 1e-3 * i as f64).collect();
        let op = DenseOperator::diagonal(&diag);
        let cfg = LanczosConfig {
            max_iters: Some(12),
            tol: 1e-14,
            ..LanczosConfig::new(10)
        };
        match lanczos_topk(&op, &cfg) {
            Err(Error::NotConverged {
                iterations, partial, ..
            }) => {
                assert_eq!(iterations, 12);
                assert_eq!(partial.eigenvalues.len(), 10);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }
}
