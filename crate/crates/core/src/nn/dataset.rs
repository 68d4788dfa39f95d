use crate::{Error, Result};

/// Labeled examples stored row-major: `inputs` is `N x input_dim`, `targets`
/// is `N x classes` one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    classes: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    ids: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from flat inputs and class labels; ids are `0..N`.
    pub fn from_labels(
        input_dim: usize,
        classes: usize,
        inputs: Vec<f64>,
        labels: &[usize],
    ) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::from_labels_with_ids(input_dim, classes, inputs, labels, ids)
    }

    pub fn from_labels_with_ids(
        input_dim: usize,
        classes: usize,
        inputs: Vec<f64>,
        labels: &[usize],
        ids: Vec<usize>,
    ) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut targets = vec![0.0; labels.len() * classes];
        for (n, &l) in labels.iter().enumerate() {
            targets[n * classes + l] = 1.0;
        }
        Self::new(input_dim, classes, inputs, targets, ids)
    }

    pub fn new(
        input_dim: usize,
        classes: usize,
        inputs: Vec<f64>,
        targets: Vec<f64>,
        ids: Vec<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one example".into()));
        }
        if input_dim == 0 || classes == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        if inputs.len() != n * input_dim {
            return Err(Error::Dimension {
                what: "dataset inputs",
                expected: n * input_dim,
                actual: inputs.len(),
            });
        }
        if targets.len() != n * classes {
            return Err(Error::Dimension {
                what: "dataset targets",
                expected: n * classes,
                actual: targets.len(),
            });
        }
        for (row, t) in targets.chunks(classes).enumerate() {
            let ones = t.iter().filter(|&&v| v == 1.0).count();
            let zeros = t.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != classes {
                return Err(Error::Config(format!("target row {row} is not one-hot")));
            }
        }
        Ok(Self {
            input_dim,
            classes,
            inputs,
            targets,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input(&self, n: usize) -> &[f64] {
        &self.inputs[n * self.input_dim..(n + 1) * self.input_dim]
    }

    pub fn target(&self, n: usize) -> &[f64] {
        &self.targets[n * self.classes..(n + 1) * self.classes]
    }

    pub fn label(&self, n: usize) -> usize {
        self.target(n)
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot target")
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|n| self.label(n)).collect()
    }

    pub fn id(&self, n: usize) -> usize {
        self.ids[n]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Rows `indices` as a new dataset, keeping their ids.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut targets = Vec::with_capacity(indices.len() * self.classes);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension {
                    what: "example index",
                    expected: self.len(),
                    actual: i,
                });
            }
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
            ids.push(self.ids[i]);
        }
        Self::new(self.input_dim, self.classes, inputs, targets, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_from_labels() {
        let d = Dataset::from_labels(2, 3, vec![0.0, 1.0, 2.0, 3.0], &[2, 0]).unwrap();
        assert_eq!(d.target(0), &[0.0, 0.0, 1.0]);
        assert_eq!(d.label(1), 0);
        assert_eq!(d.ids(), &[0, 1]);
    }

    #[test]
    fn rejects_empty_and_bad_targets() {
        assert!(Dataset::from_labels(2, 2, vec![], &[]).is_err());
        assert!(Dataset::from_labels(1, 2, vec![0.0], &[2]).is_err());
        assert!(Dataset::new(1, 2, vec![0.0], vec![0.5, 0.5], vec![0]).is_err());
        assert!(Dataset::new(1, 2, vec![0.0], vec![1.0, 1.0], vec![0]).is_err());
    }

    #[test]
    fn select_keeps_ids() {
        let d = Dataset::from_labels(1, 2, vec![0.0, 1.0, 2.0], &[0, 1, 0]).unwrap();
        let s = d.select(&[2, 1]).unwrap();
        assert_eq!(s.ids(), &[2, 1]);
        assert_eq!(s.input(0), &[2.0]);
        assert!(d.select(&[3]).is_err());
    }
}
