use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, lanczos_topk, norm, HessianOperator, IncrementalSvd, LanczosConfig};
use crate::nn::{Dataset, Network, ParamVector};
use crate::{Error, Result};

pub const BUNDLE_FORMAT: &str = "delta-uq-bundle";
pub const BUNDLE_VERSION: u32 = 1;

const ORTHONORMALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Hessian,
    Opg,
}

impl CurvatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurvatureKind::Hessian => "hessian",
            CurvatureKind::Opg => "opg",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFlags {
    /// Fewer than K nontrivial directions; the tail was filled with `lambda`.
    pub padded: bool,
    /// `lambda_K < lambda`: error bounds downstream are heuristic.
    pub bound_degraded: bool,
    /// Some computed eigenvalue is not positive.
    pub indefinite: bool,
}

/// Harmonic-mean linearization of the unresolved spectrum between `lambda`
/// and `lambda_k`, returned as `(lambda_tilde, eps_lambda)`.
pub fn harmonic_linearization(lambda: f64, lambda_k: f64) -> (f64, f64) {
    let tilde = 2.0 * lambda * lambda_k / (lambda + lambda_k);
    let eps = (1.0 / lambda - 1.0 / lambda_k).abs() / 2.0;
    (tilde, eps)
}

/// Top-K eigenpairs of a curvature matrix plus the tail linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBundle {
    pub kind: CurvatureKind,
    /// Training-set size the curvature was averaged over.
    pub n: usize,
    pub l2_rate: f64,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `P x K`, orthonormal columns.
    pub eigenvectors: DMatrix<f64>,
    /// `(lambda_tilde, eps_lambda)`; absent when `lambda_K <= 0`.
    pub linearization: Option<(f64, f64)>,
    pub flags: BundleFlags,
    /// Lanczos steps or gradient rows consumed.
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

impl SpectralBundle {
    /// Builds a bundle from unordered eigenpairs (columns of `vectors`).
    pub fn from_eigenpairs(
        kind: CurvatureKind,
        n: usize,
        l2_rate: f64,
        values: Vec<f64>,
        vectors: DMatrix<f64>,
        residuals: Vec<f64>,
        iterations: usize,
    ) -> Result<Self> {
        if values.is_empty() || values.len() != vectors.ncols() {
            return Err(Error::Dimension {
                what: "eigenvector columns",
                expected: values.len(),
                actual: vectors.ncols(),
            });
        }
        if !(l2_rate > 0.0) {
            return Err(Error::Config(format!("l2 rate must be positive, got {l2_rate}")));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let eigenvectors = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
        let residuals = if residuals.len() == order.len() {
            order.iter().map(|&i| residuals[i]).collect()
        } else {
            vec![0.0; order.len()]
        };
        let lambda_k = *eigenvalues.last().expect("nonempty");
        let linearization = (lambda_k > 0.0).then(|| harmonic_linearization(l2_rate, lambda_k));
        let flags = BundleFlags {
            padded: false,
            bound_degraded: lambda_k < l2_rate,
            indefinite: lambda_k <= 0.0,
        };
        Ok(Self {
            kind,
            n,
            l2_rate,
            eigenvalues,
            eigenvectors,
            linearization,
            flags,
            iterations,
            residuals,
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn param_count(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn lambda_k(&self) -> f64 {
        *self.eigenvalues.last().expect("bundle is never empty")
    }

    /// `(lambda_tilde, eps_lambda)`, or an error for an indefinite bundle.
    pub fn linearized(&self) -> Result<(f64, f64)> {
        self.linearization.ok_or_else(|| {
            Error::Invariant(format!(
                "{} bundle has lambda_K = {:e} <= 0; no tail linearization exists",
                self.kind.as_str(),
                self.lambda_k()
            ))
        })
    }

    pub fn orthonormality_error(&self) -> f64 {
        let q = &self.eigenvectors;
        (q.transpose() * q - DMatrix::identity(q.ncols(), q.ncols())).amax()
    }

    /// Checks every structural invariant and names the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("{} bundle: {msg}", self.kind.as_str())));
        if self.eigenvalues.is_empty() || self.eigenvalues.len() != self.eigenvectors.ncols() {
            return fail(format!(
                "{} eigenvalues for {} eigenvectors",
                self.eigenvalues.len(),
                self.eigenvectors.ncols()
            ));
        }
        if self.eigenvalues.len() > self.eigenvectors.nrows() {
            return fail(format!("K = {} exceeds P = {}", self.eigenvalues.len(), self.eigenvectors.nrows()));
        }
        if self.eigenvalues.iter().chain(self.eigenvectors.iter()).any(|v| !v.is_finite()) {
            return fail("non-finite eigenvalue or eigenvector entry".into());
        }
        if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return fail("eigenvalues not sorted descending".into());
        }
        let ortho = self.orthonormality_error();
        if ortho > ORTHONORMALITY_TOL {
            return fail(format!("eigenvectors not orthonormal (max |Q^T Q - I| = {ortho:e})"));
        }
        if !(self.l2_rate > 0.0) {
            return fail(format!("l2 rate {} is not positive", self.l2_rate));
        }
        let lambda_k = self.lambda_k();
        if self.kind == CurvatureKind::Opg && lambda_k < self.l2_rate * (1.0 - 1e-12) {
            return fail(format!("OPG eigenvalue {lambda_k:e} below l2 rate {:e}", self.l2_rate));
        }
        match (self.linearization, lambda_k > 0.0) {
            (Some((tilde, eps)), true) => {
                let (t, e) = harmonic_linearization(self.l2_rate, lambda_k);
                if (tilde - t).abs() > 1e-12 * t.abs() || (eps - e).abs() > 1e-12 * e.abs().max(1.0) {
                    return fail(format!(
                        "lambda_tilde/eps_lambda ({tilde}, {eps}) inconsistent with lambda_K (expected ({t}, {e}))"
                    ));
                }
            }
            (None, false) => {}
            (Some(_), false) => return fail("linearization present for non-positive lambda_K".into()),
            (None, true) => return fail("linearization missing".into()),
        }
        if self.flags.bound_degraded != (lambda_k < self.l2_rate) {
            return fail("bound_degraded flag disagrees with lambda_K".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = BundleFile {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            kind: self.kind,
            p: self.param_count(),
            k: self.k(),
            n: self.n,
            l2_rate: self.l2_rate,
            lambda_tilde: self.linearization.map(|l| l.0),
            eps_lambda: self.linearization.map(|l| l.1),
            flags: self.flags,
            iterations: self.iterations,
            eigenvalues: self.eigenvalues.clone(),
            residuals: self.residuals.clone(),
            eigenvectors: self.eigenvectors.column_iter().map(|c| c.iter().copied().collect()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("bundle serializes")
    }

    /// Parses and validates a bundle; `path` is used in error messages only.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let file: BundleFile = serde_json::from_str(text).map_err(|e| parse(format!("bad bundle: {e}")))?;
        if file.format != BUNDLE_FORMAT {
            return Err(parse(format!("format {:?} is not {BUNDLE_FORMAT:?}", file.format)));
        }
        if file.version != BUNDLE_VERSION {
            return Err(parse(format!("unsupported bundle version {}", file.version)));
        }
        if file.eigenvalues.len() != file.k || file.eigenvectors.len() != file.k {
            return Err(parse(format!(
                "K = {} but {} eigenvalues and {} eigenvectors",
                file.k,
                file.eigenvalues.len(),
                file.eigenvectors.len()
            )));
        }
        if let Some(bad) = file.eigenvectors.iter().position(|c| c.len() != file.p) {
            return Err(parse(format!("eigenvector {bad} has length {} != P = {}", file.eigenvectors[bad].len(), file.p)));
        }
        let linearization = match (file.lambda_tilde, file.eps_lambda) {
            (Some(t), Some(e)) => Some((t, e)),
            (None, None) => None,
            _ => return Err(parse("lambda_tilde and eps_lambda must both be present or absent".into())),
        };
        let flat: Vec<f64> = file.eigenvectors.into_iter().flatten().collect();
        let bundle = Self {
            kind: file.kind,
            n: file.n,
            l2_rate: file.l2_rate,
            eigenvalues: file.eigenvalues,
            eigenvectors: DMatrix::from_column_slice(file.p, file.k, &flat),
            linearization,
            flags: file.flags,
            iterations: file.iterations,
            residuals: file.residuals,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    format: String,
    version: u32,
    kind: CurvatureKind,
    p: usize,
    k: usize,
    n: usize,
    l2_rate: f64,
    lambda_tilde: Option<f64>,
    eps_lambda: Option<f64>,
    flags: BundleFlags,
    iterations: usize,
    eigenvalues: Vec<f64>,
    residuals: Vec<f64>,
    /// One array of length P per eigenvector.
    eigenvectors: Vec<Vec<f64>>,
}

/// Top-K eigenpairs of the regularized empirical Hessian by Lanczos over
/// Hessian-vector products.
pub fn hessian_topk(
    network: &Network,
    w: &ParamVector,
    data: &Dataset,
    cfg: &LanczosConfig,
) -> Result<SpectralBundle> {
    let op = HessianOperator::new(network, w, data);
    let r = lanczos_topk(&op, cfg)?;
    SpectralBundle::from_eigenpairs(
        CurvatureKind::Hessian,
        data.len(),
        network.l2_rate(),
        r.eigenvalues,
        r.eigenvectors,
        r.residuals,
        r.iterations,
    )
}

fn default_block_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpgConfig {
    pub k: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    /// Rank carried between blocks; defaults to `2 K`.
    #[serde(default)]
    pub retain: Option<usize>,
}

impl OpgConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            block_size: default_block_size(),
            retain: None,
        }
    }

    /// Keeps every direction between blocks, so the result is exact and
    /// independent of the block size. Memory grows to `P x min(P, N)`.
    pub fn lossless(k: usize) -> Self {
        Self {
            retain: Some(usize::MAX),
            ..Self::new(k)
        }
    }
}

/// Top-K eigenpairs of the regularized outer-product-of-gradients matrix
/// `G = (1/N) sum g g^T + lambda I`, streamed over per-example gradient
/// blocks.
pub fn opg_topk(network: &Network, w: &ParamVector, data: &Dataset, cfg: &OpgConfig) -> Result<SpectralBundle> {
    let p = network.param_count();
    let k = cfg.k;
    if k == 0 || k > p {
        return Err(Error::Config(format!("OPG needs 0 < K <= P, got K={k}, P={p}")));
    }
    if cfg.block_size == 0 {
        return Err(Error::Config("OPG block size must be positive".into()));
    }
    let lambda = network.l2_rate();
    let retain = cfg.retain.unwrap_or(2 * k).max(k);
    let n = data.len();
    let mut isvd = IncrementalSvd::new(p, retain)?;
    let mut start = 0;
    while start < n {
        let end = (start + cfg.block_size).min(n);
        isvd.update(&network.per_example_grads(w, data, start..end)?)?;
        start = end;
    }
    isvd.truncate(k);

    let found = isvd.singular_values().len();
    let mut values: Vec<f64> = isvd.singular_values().iter().map(|s| s * s / n as f64 + lambda).collect();
    let mut vectors = DMatrix::zeros(p, k);
    vectors.columns_mut(0, found).copy_from(isvd.right_vectors());
    if found < k {
        fill_complement(&mut vectors, found);
        values.resize(k, lambda);
    }
    let mut bundle = SpectralBundle::from_eigenpairs(
        CurvatureKind::Opg,
        n,
        lambda,
        values,
        vectors,
        Vec::new(),
        n,
    )?;
    bundle.flags.padded = found < k;
    Ok(bundle)
}

/// Fills columns `from..` with unit vectors orthogonal to all earlier ones.
fn fill_complement(q: &mut DMatrix<f64>, from: usize) {
    let p = q.nrows();
    let mut next = from;
    for axis in 0..p {
        if next == q.ncols() {
            break;
        }
        let mut v = vec![0.0; p];
        v[axis] = 1.0;
        for _ in 0..2 {
            for c in 0..next {
                let col: Vec<f64> = q.column(c).iter().copied().collect();
                let d = dot(&v, &col);
                axpy(-d, &col, &mut v);
            }
        }
        let len = norm(&v);
        if len > 0.5 {
            v.iter_mut().for_each(|x| *x /= len);
            q.column_mut(next).copy_from_slice(&v);
            next += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub kind: CurvatureKind,
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub l2_rate: f64,
    pub lambda_1: f64,
    pub lambda_k: f64,
    pub lambda_tilde: Option<f64>,
    pub eps_lambda: Option<f64>,
    /// `lambda_K - lambda`.
    pub gap_width: f64,
    /// Index of the first eigenvalue below `lambda`, if any.
    pub lambda_crossing: Option<usize>,
    pub below_l2_rate: usize,
    pub negative: usize,
    pub iterations: usize,
    pub flags: BundleFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub summary: SpectrumSummary,
    pub eigenvalues: Vec<f64>,
}

impl SpectrumReport {
    /// Columns: `index,eigenvalue,magnitude,log10_magnitude`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,magnitude,log10_magnitude\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{i},{v:e},{:e},{}\n", v.abs(), v.abs().log10()));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

pub fn spectrum_report(bundle: &SpectralBundle) -> SpectrumReport {
    let lambda = bundle.l2_rate;
    let ev = &bundle.eigenvalues;
    SpectrumReport {
        summary: SpectrumSummary {
            kind: bundle.kind,
            p: bundle.param_count(),
            k: bundle.k(),
            n: bundle.n,
            l2_rate: lambda,
            lambda_1: ev[0],
            lambda_k: bundle.lambda_k(),
            lambda_tilde: bundle.linearization.map(|l| l.0),
            eps_lambda: bundle.linearization.map(|l| l.1),
            gap_width: bundle.lambda_k() - lambda,
            lambda_crossing: ev.iter().position(|&v| v < lambda),
            below_l2_rate: ev.iter().filter(|&&v| v < lambda).count(),
            negative: ev.iter().filter(|&&v| v < 0.0).count(),
            iterations: bundle.iterations,
            flags: bundle.flags,
        },
        eigenvalues: ev.clone(),
    }
}
