use nalgebra::DMatrix;

use crate::{Error, Result};

/// Streaming truncated SVD of a tall stack of row blocks.
///
/// Only the right singular vectors and singular values are kept: for rows
/// seen so far `A`, the state `(V, s)` satisfies `A^T A ~= V diag(s^2) V^T`.
/// Each update stacks `diag(s) V^T` on top of the new block and
/// re-factorizes, which costs `O(P (r + b)^2)` for rank `r` and block size
/// `b`.
#[derive(Debug, Clone)]
pub struct IncrementalSvd {
    dim: usize,
    retain: usize,
    vectors: DMatrix<f64>,
    singular: Vec<f64>,
    rows_seen: usize,
}

impl IncrementalSvd {
    /// `retain` caps the rank carried between updates.
    pub fn new(dim: usize, retain: usize) -> Result<Self> {
        if dim == 0 || retain == 0 {
            return Err(Error::Config("incremental SVD needs positive dim and rank".into()));
        }
        Ok(Self {
            dim,
            retain,
            vectors: DMatrix::zeros(dim, 0),
            singular: Vec::new(),
            rows_seen: 0,
        })
    }

    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Right singular vectors as columns, matching `singular_values`.
    pub fn right_vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Folds in a `b x dim` block of new rows.
    pub fn update(&mut self, block: &DMatrix<f64>) -> Result<()> {
        if block.ncols() != self.dim {
            return Err(Error::Dimension {
                what: "incremental SVD block width",
                expected: self.dim,
                actual: block.ncols(),
            });
        }
        if block.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let r = self.singular.len();
        let b = block.nrows();
        // Columns of `stacked` are the rows of [diag(s) V^T; block].
        let mut stacked = DMatrix::zeros(self.dim, r + b);
        for (j, &s) in self.singular.iter().enumerate() {
            stacked.set_column(j, &(self.vectors.column(j) * s));
        }
        stacked
            .columns_mut(r, b)
            .copy_from(&block.transpose());
        self.rows_seen += b;

        let svd = stacked.svd(true, false);
        let u = svd.u.expect("requested left vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]));
        let keep = order.len().min(self.retain).min(self.rows_seen);
        self.singular = order[..keep].iter().map(|&i| svd.singular_values[i]).collect();
        self.vectors = DMatrix::from_fn(self.dim, keep, |row, c| u[(row, order[c])]);
        Ok(())
    }

    /// Drops all but the leading `k` components.
    pub fn truncate(&mut self, k: usize) {
        if k < self.singular.len() {
            self.singular.truncate(k);
            self.vectors = self.vectors.columns(0, k).into_owned();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn lossless_stream_matches_batch_svd() {
        let a = random(40, 12, 1);
        let mut isvd = IncrementalSvd::new(12, 12).unwrap();
        for start in (0..40).step_by(7) {
            let rows = 7.min(40 - start);
            isvd.update(&a.rows(start, rows).into_owned()).unwrap();
        }
        let mut expected: Vec<f64> = a.clone().svd(false, false).singular_values.iter().cloned().collect();
        expected.sort_by(|x, y| y.total_cmp(x));
        for (got, want) in isvd.singular_values().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-10 * want.max(1.0));
        }
        let v = isvd.right_vectors();
        assert!((v.transpose() * v - DMatrix::identity(12, 12)).amax() < 1e-12);
    }

    #[test]
    fn single_row_is_rank_one() {
        let mut isvd = IncrementalSvd::new(3, 4).unwrap();
        isvd.update(&DMatrix::from_row_slice(1, 3, &[3.0, 0.0, 4.0])).unwrap();
        assert_eq!(isvd.singular_values().len(), 1);
        assert!((isvd.singular_values()[0] - 5.0).abs() < 1e-14);
        let v = isvd.right_vectors().column(0);
        assert!((v[0].abs() - 0.6).abs() < 1e-14 && (v[2].abs() - 0.8).abs() < 1e-14);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut isvd = IncrementalSvd::new(3, 2).unwrap();
        assert!(isvd.update(&DMatrix::zeros(2, 4)).is_err());
    }
}
