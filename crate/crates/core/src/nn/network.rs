use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Dataset, LayerLayout, NetworkConfig, ParamVector};
use crate::{Error, Result};

/// Jacobian of the class probabilities with respect to all parameters for a
/// single input, `classes x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub matrix: DMatrix<f64>,
    pub input_id: usize,
}

impl Sensitivity {
    pub fn classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.matrix.ncols()
    }

    /// Squared row norms, `diag(F F^T)`.
    pub fn row_norms_squared(&self) -> Vec<f64> {
        self.matrix
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect()
    }
}

/// A dense ReLU/softmax network bound to its configuration.
///
/// All dataset-level reductions run over fixed chunks of examples. With the
/// default `chunk_size` of 0 the loop is serial; otherwise chunks are
/// evaluated in parallel and their partial sums are added in chunk order, so
/// results only depend on the chunk size.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    layout: Vec<LayerLayout>,
    chunk_size: usize,
}

/// Per-example buffers for forward and tangent passes.
struct Scratch {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    rpre: Vec<Vec<f64>>,
    rpost: Vec<Vec<f64>>,
    delta: Vec<f64>,
    rdelta: Vec<f64>,
    back: Vec<f64>,
    rback: Vec<f64>,
}

impl Scratch {
    fn new(layout: &[LayerLayout]) -> Self {
        let widths: Vec<Vec<f64>> = layout.iter().map(|l| vec![0.0; l.fan_out]).collect();
        let max = layout
            .iter()
            .map(|l| l.fan_out.max(l.fan_in))
            .max()
            .unwrap_or(0);
        Self {
            pre: widths.clone(),
            post: widths.clone(),
            rpre: widths.clone(),
            rpost: widths,
            delta: vec![0.0; max],
            rdelta: vec![0.0; max],
            back: vec![0.0; max],
            rback: vec![0.0; max],
        }
    }
}

#[inline]
fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn softmax_in_place(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `out = W x + b` with `W` row-major `out.len() x x.len()`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let fan_in = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * fan_in..(r + 1) * fan_in];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self {
            config,
            layout,
            chunk_size: 0,
        })
    }

    /// Sets the number of examples per parallel chunk (0 = serial).
    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn l2_rate(&self) -> f64 {
        self.config.l2_rate
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        w.check_len(&self.config)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim() {
            return Err(Error::Dimension {
                what: "input vector",
                expected: self.config.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.input_dim() != self.config.input_dim() {
            return Err(Error::Dimension {
                what: "dataset input width",
                expected: self.config.input_dim(),
                actual: data.input_dim(),
            });
        }
        if data.classes() != self.classes() {
            return Err(Error::Dimension {
                what: "dataset class count",
                expected: self.classes(),
                actual: data.classes(),
            });
        }
        Ok(())
    }

    /// Forward pass filling `s.pre` (pre-activations) and `s.post`
    /// (activations; softmax probabilities for the output layer).
    fn forward_trace(&self, w: &[f64], x: &[f64], s: &mut Scratch) {
        let last = self.layout.len() - 1;
        for (i, l) in self.layout.iter().enumerate() {
            let weights = &w[l.weight_offset..l.bias_offset];
            let bias = &w[l.bias_offset..l.end()];
            let (done, rest) = s.post.split_at_mut(i);
            let input = if i == 0 { x } else { &done[i - 1][..] };
            affine(weights, bias, input, &mut s.pre[i]);
            if i == last {
                softmax_in_place(&s.pre[i], &mut rest[0]);
            } else {
                for (a, &z) in rest[0].iter_mut().zip(&s.pre[i]) {
                    *a = z.max(0.0);
                }
            }
        }
    }

    /// Reverse sweep from `s.delta` (gradient with respect to the output
    /// logits, first `classes` entries) accumulating `scale * dC/dw` into
    /// `grad`. Requires a preceding `forward_trace`.
    fn backprop(&self, w: &[f64], x: &[f64], s: &mut Scratch, grad: &mut [f64], scale: f64) {
        for (i, l) in self.layout.iter().enumerate().rev() {
            let input = if i == 0 { x } else { &s.post[i - 1][..] };
            for r in 0..l.fan_out {
                let d = scale * s.delta[r];
                if d != 0.0 {
                    let row = &mut grad[l.weight_offset + r * l.fan_in..][..l.fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                grad[l.bias_offset + r] += d;
            }
            if i == 0 {
                break;
            }
            let weights = &w[l.weight_offset..l.bias_offset];
            s.back[..l.fan_in].iter_mut().for_each(|v| *v = 0.0);
            for r in 0..l.fan_out {
                let d = s.delta[r];
                if d != 0.0 {
                    let row = &weights[r * l.fan_in..(r + 1) * l.fan_in];
                    for (b, &wv) in s.back[..l.fan_in].iter_mut().zip(row) {
                        *b += wv * d;
                    }
                }
            }
            let z = &s.pre[i - 1];
            for c in 0..l.fan_in {
                s.delta[c] = s.back[c] * relu_grad(z[c]);
            }
        }
    }

    /// Reduces `f(example, accumulator, scratch)` over `indices` into a vector
    /// of length `len`, honoring the chunking contract.
    fn reduce<F>(&self, indices: &[usize], len: usize, f: F) -> Vec<f64>
    where
        F: Fn(usize, &mut [f64], &mut Scratch) + Sync,
    {
        if self.chunk_size == 0 || self.chunk_size >= indices.len() {
            let mut acc = vec![0.0; len];
            let mut s = Scratch::new(&self.layout);
            for &n in indices {
                f(n, &mut acc, &mut s);
            }
            return acc;
        }
        let partials: Vec<Vec<f64>> = indices
            .par_chunks(self.chunk_size)
            .map(|chunk| {
                let mut acc = vec![0.0; len];
                let mut s = Scratch::new(&self.layout);
                for &n in chunk {
                    f(n, &mut acc, &mut s);
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; len];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    }

    pub fn logits(&self, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(w)?;
        self.check_input(x)?;
        let mut s = Scratch::new(&self.layout);
        self.forward_trace(w.as_slice(), x, &mut s);
        Ok(s.pre.pop().expect("at least one layer"))
    }

    /// Class probabilities for one input.
    pub fn forward(&self, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(w)?;
        self.check_input(x)?;
        let mut s = Scratch::new(&self.layout);
        self.forward_trace(w.as_slice(), x, &mut s);
        Ok(s.post.pop().expect("at least one layer"))
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(w, x)?))
    }

    /// Mean cross-entropy over `data` plus `(l2_rate/2)|w|^2`.
    pub fn cost(&self, w: &ParamVector, data: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.cost_on(w, data, &all)
    }

    /// Regularized mean cross-entropy over the examples in `indices`.
    pub fn cost_on(&self, w: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
        self.check_params(w)?;
        self.check_dataset(data)?;
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let ws = w.as_slice();
        let total = self.reduce(indices, 1, |n, acc, s| {
            self.forward_trace(ws, data.input(n), s);
            let z = s.pre.last().expect("layer");
            let fit: f64 = z.iter().zip(data.target(n)).map(|(a, b)| a * b).sum();
            acc[0] += log_sum_exp(z) - fit;
        });
        Ok(total[0] / indices.len() as f64 + 0.5 * self.config.l2_rate * w.norm_squared())
    }

    /// Gradient of [`Network::cost`].
    pub fn grad(&self, w: &ParamVector, data: &Dataset) -> Result<ParamVector> {
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(self.cost_and_grad_on(w, data, &all)?.1)
    }

    /// Regularized cost and gradient over the examples in `indices`.
    pub fn cost_and_grad_on(
        &self,
        w: &ParamVector,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, ParamVector)> {
        self.check_params(w)?;
        self.check_dataset(data)?;
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = self.param_count();
        let k = self.classes();
        let ws = w.as_slice();
        // Last slot carries the summed data cost.
        let mut acc = self.reduce(indices, p + 1, |n, acc, s| {
            self.forward_trace(ws, data.input(n), s);
            let y = data.target(n);
            let z = s.pre.last().expect("layer");
            let fit: f64 = z.iter().zip(y).map(|(a, b)| a * b).sum();
            acc[p] += log_sum_exp(z) - fit;
            let probs = s.post.last().expect("layer");
            for m in 0..k {
                s.delta[m] = probs[m] - y[m];
            }
            self.backprop(ws, data.input(n), s, &mut acc[..p], 1.0);
        });
        let inv_n = 1.0 / indices.len() as f64;
        let lambda = self.config.l2_rate;
        let data_cost = acc.pop().expect("cost slot");
        for (g, &wv) in acc.iter_mut().zip(ws) {
            *g = *g * inv_n + lambda * wv;
        }
        Ok((
            data_cost * inv_n + 0.5 * lambda * w.norm_squared(),
            ParamVector::new(acc),
        ))
    }

    /// Rows `dC_n/dw` (data term only, no regularizer) for examples in `batch`.
    pub fn per_example_grads(
        &self,
        w: &ParamVector,
        data: &Dataset,
        batch: Range<usize>,
    ) -> Result<DMatrix<f64>> {
        self.check_params(w)?;
        self.check_dataset(data)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if batch.end > data.len() {
            return Err(Error::Dimension {
                what: "batch end",
                expected: data.len(),
                actual: batch.end,
            });
        }
        let p = self.param_count();
        let k = self.classes();
        let ws = w.as_slice();
        let rows = batch.len();
        let compute = |n: usize, s: &mut Scratch| {
            let mut g = vec![0.0; p];
            self.forward_trace(ws, data.input(n), s);
            let probs = s.post.last().expect("layer");
            let y = data.target(n);
            for m in 0..k {
                s.delta[m] = probs[m] - y[m];
            }
            self.backprop(ws, data.input(n), s, &mut g, 1.0);
            g
        };
        let grads: Vec<Vec<f64>> = if self.chunk_size == 0 {
            let mut s = Scratch::new(&self.layout);
            batch.map(|n| compute(n, &mut s)).collect()
        } else {
            let idx: Vec<usize> = batch.collect();
            idx.par_chunks(self.chunk_size)
                .flat_map_iter(|chunk| {
                    let mut s = Scratch::new(&self.layout);
                    chunk.iter().map(|&n| compute(n, &mut s)).collect::<Vec<_>>()
                })
                .collect()
        };
        Ok(DMatrix::from_fn(rows, p, |r, c| grads[r][c]))
    }

    /// Exact product of the regularized empirical Hessian with `v`, computed
    /// by a tangent (forward-mode) pass carried through the reverse sweep.
    pub fn hvp(&self, w: &ParamVector, data: &Dataset, v: &[f64]) -> Result<ParamVector> {
        let mut out = self.data_hvp(w, data, v)?;
        let lambda = self.config.l2_rate;
        for (o, &vi) in out.iter_mut().zip(v) {
            *o += lambda * vi;
        }
        Ok(ParamVector::new(out))
    }

    /// Product of the data-term Hessian (no regularizer) with `v`.
    pub fn data_hvp(&self, w: &ParamVector, data: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
        self.check_params(w)?;
        self.check_dataset(data)?;
        if v.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "hvp direction",
                expected: self.param_count(),
                actual: v.len(),
            });
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let ws = w.as_slice();
        let mut out = self.reduce(&all, self.param_count(), |n, acc, s| {
            self.example_hvp(ws, v, data.input(n), data.target(n), s, acc);
        });
        let inv_n = 1.0 / data.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv_n);
        Ok(out)
    }

    fn example_hvp(
        &self,
        w: &[f64],
        v: &[f64],
        x: &[f64],
        y: &[f64],
        s: &mut Scratch,
        acc: &mut [f64],
    ) {
        let last = self.layout.len() - 1;
        // Forward with tangents: rpre = d(pre)/dt along w + t v.
        for (i, l) in self.layout.iter().enumerate() {
            let weights = &w[l.weight_offset..l.bias_offset];
            let bias = &w[l.bias_offset..l.end()];
            let vw = &v[l.weight_offset..l.bias_offset];
            let vb = &v[l.bias_offset..l.end()];
            let (done, rest) = s.post.split_at_mut(i);
            let (rdone, rrest) = s.rpost.split_at_mut(i);
            let input = if i == 0 { x } else { &done[i - 1][..] };
            affine(weights, bias, input, &mut s.pre[i]);
            affine(vw, vb, input, &mut s.rpre[i]);
            if i > 0 {
                let rin = &rdone[i - 1];
                for r in 0..l.fan_out {
                    let row = &weights[r * l.fan_in..(r + 1) * l.fan_in];
                    s.rpre[i][r] += row.iter().zip(rin).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if i == last {
                softmax_in_place(&s.pre[i], &mut rest[0]);
                let p = &rest[0];
                let dot: f64 = p.iter().zip(&s.rpre[i]).map(|(a, b)| a * b).sum();
                for r in 0..l.fan_out {
                    rrest[0][r] = p[r] * (s.rpre[i][r] - dot);
                }
            } else {
                for r in 0..l.fan_out {
                    let z = s.pre[i][r];
                    rest[0][r] = z.max(0.0);
                    rrest[0][r] = relu_grad(z) * s.rpre[i][r];
                }
            }
        }
        let k = self.layout[last].fan_out;
        for m in 0..k {
            s.delta[m] = s.post[last][m] - y[m];
            s.rdelta[m] = s.rpost[last][m];
        }
        for (i, l) in self.layout.iter().enumerate().rev() {
            let (input, rinput): (&[f64], Option<&[f64]>) = if i == 0 {
                (x, None)
            } else {
                (&s.post[i - 1], Some(&s.rpost[i - 1]))
            };
            for r in 0..l.fan_out {
                let d = s.delta[r];
                let rd = s.rdelta[r];
                let row = &mut acc[l.weight_offset + r * l.fan_in..][..l.fan_in];
                match rinput {
                    Some(ra) => {
                        for ((g, &a), &rav) in row.iter_mut().zip(input).zip(ra) {
                            *g += rd * a + d * rav;
                        }
                    }
                    None => {
                        for (g, &a) in row.iter_mut().zip(input) {
                            *g += rd * a;
                        }
                    }
                }
                acc[l.bias_offset + r] += rd;
            }
            if i == 0 {
                break;
            }
            let weights = &w[l.weight_offset..l.bias_offset];
            let vw = &v[l.weight_offset..l.bias_offset];
            s.back[..l.fan_in].iter_mut().for_each(|b| *b = 0.0);
            s.rback[..l.fan_in].iter_mut().for_each(|b| *b = 0.0);
            for r in 0..l.fan_out {
                let d = s.delta[r];
                let rd = s.rdelta[r];
                let row = &weights[r * l.fan_in..(r + 1) * l.fan_in];
                let vrow = &vw[r * l.fan_in..(r + 1) * l.fan_in];
                for c in 0..l.fan_in {
                    s.back[c] += row[c] * d;
                    s.rback[c] += vrow[c] * d + row[c] * rd;
                }
            }
            let z = &s.pre[i - 1];
            for c in 0..l.fan_in {
                let g = relu_grad(z[c]);
                s.delta[c] = s.back[c] * g;
                s.rdelta[c] = s.rback[c] * g;
            }
        }
    }

    /// Jacobian of the class probabilities at `x`, one reverse sweep per class.
    pub fn sensitivity(&self, w: &ParamVector, x: &[f64], input_id: usize) -> Result<Sensitivity> {
        self.check_params(w)?;
        self.check_input(x)?;
        let ws = w.as_slice();
        let k = self.classes();
        let p = self.param_count();
        let mut s = Scratch::new(&self.layout);
        self.forward_trace(ws, x, &mut s);
        let probs = s.post.last().expect("layer").clone();
        let mut matrix = DMatrix::zeros(k, p);
        let mut row = vec![0.0; p];
        for i in 0..k {
            // d p_i / d z = p_i (e_i - p)
            for m in 0..k {
                let e = if m == i { 1.0 } else { 0.0 };
                s.delta[m] = probs[i] * (e - probs[m]);
            }
            row.iter_mut().for_each(|r| *r = 0.0);
            self.backprop(ws, x, &mut s, &mut row, 1.0);
            for (c, &v) in row.iter().enumerate() {
                matrix[(i, c)] = v;
            }
        }
        Ok(Sensitivity { matrix, input_id })
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
