use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dot;
use crate::nn::{Dataset, Network, ParamVector};

/// A symmetric linear map on `R^dim`, applied matrix-free.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// Writes `A v` into `out`. Both slices have length `dim()`.
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// Wraps an explicit symmetric matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "operator matrix must be square");
        Self { matrix }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &vc) in v.iter().enumerate() {
            if vc != 0.0 {
                let col = &self.matrix.as_slice()[c * n..(c + 1) * n];
                for (o, &m) in out.iter_mut().zip(col) {
                    *o += m * vc;
                }
            }
        }
    }
}

/// The regularized empirical Hessian of a network at fixed parameters,
/// applied through exact Hessian-vector products.
pub struct HessianOperator<'a> {
    network: &'a Network,
    params: &'a ParamVector,
    data: &'a Dataset,
}

impl<'a> HessianOperator<'a> {
    pub fn new(network: &'a Network, params: &'a ParamVector, data: &'a Dataset) -> Self {
        Self {
            network,
            params,
            data,
        }
    }
}

impl LinearOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.network.param_count()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let hv = self
            .network
            .hvp(self.params, self.data, v)
            .expect("operator dimensions are fixed at construction");
        out.copy_from_slice(hv.as_slice());
    }
}

/// Largest relative violation of `<u, A v> = <A u, v>` over random probe
/// pairs.
pub fn max_asymmetry(op: &dyn LinearOperator, probes: usize, seed: u64) -> f64 {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut au = vec![0.0; n];
    let mut av = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        op.apply(&u, &mut au);
        op.apply(&v, &mut av);
        let a = dot(&u, &av);
        let b = dot(&au, &v);
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkConfig;

    #[test]
    fn dense_operator_applies_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let op = DenseOperator::new(m);
        let mut out = [0.0; 2];
        op.apply(&[1.0, -1.0], &mut out);
        assert_eq!(out, [1.0, -2.0]);
        assert!(max_asymmetry(&op, 5, 0) < 1e-14);
    }

    #[test]
    fn hessian_operator_is_symmetric() {
        let config = NetworkConfig::new(vec![3, 4, 3], 0.01).unwrap();
        let w = ParamVector::init(&config, 1);
        let data = Dataset::from_labels(3, 3, vec![0.1, -0.4, 0.7, 1.0, 0.2, -0.3], &[0, 2]).unwrap();
        let net = Network::new(config).unwrap();
        let op = HessianOperator::new(&net, &w, &data);
        assert!(max_asymmetry(&op, 5, 3) < 1e-10);
    }
}
