//! Top-K eigenpairs of the regularized Hessian and of the outer-product
//! gradient matrix, without forming either `P x P` matrix.

mod bundle;
mod isvd;
mod lanczos;
mod operator;

pub use bundle::{
    harmonic_linearization, hessian_topk, opg_topk, spectrum_report, BundleFlags, CurvatureKind,
    OpgConfig, SpectralBundle, SpectrumReport, SpectrumSummary, BUNDLE_FORMAT, BUNDLE_VERSION,
};
pub use isvd::IncrementalSvd;
pub use lanczos::{lanczos_topk, LanczosConfig, LanczosResult};
pub use operator::{max_asymmetry, DenseOperator, HessianOperator, LinearOperator};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
