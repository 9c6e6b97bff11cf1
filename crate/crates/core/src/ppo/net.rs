//! Two-headed tanh MLP (shared trunk, softmax policy head, scalar value head) over one flat
//! parameter vector, with hand-written backpropagation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Dense {
    rows: usize,
    cols: usize,
    offset: usize,
}

impl Dense {
    fn weights(&self) -> usize {
        self.rows * self.cols
    }

    fn len(&self) -> usize {
        self.weights() + self.rows
    }

    fn apply(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        let w = &params[self.offset..self.offset + self.weights()];
        let b = &params[self.offset + self.weights()..self.offset + self.len()];
        out.clear();
        out.extend(b.iter().enumerate().map(|(i, bi)| {
            bi + w[i * self.cols..(i + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        }));
    }

    /// Accumulates parameter gradients for output gradient `dy` and returns `dL/dx`.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &params[self.offset..self.offset + self.weights()];
        let mut dx = vec![0.0; self.cols];
        for (i, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = self.offset + i * self.cols;
            for j in 0..self.cols {
                grad[row + j] += g * x[j];
                dx[j] += g * w[i * self.cols + j];
            }
            grad[self.offset + self.weights() + i] += g;
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueNet {
    input: usize,
    actions: usize,
    layers: [Dense; 4],
    params: Vec<f64>,
}

/// Intermediate activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl Forward {
    pub fn log_prob(&self, action: usize) -> f64 {
        log_softmax(&self.logits)[action]
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Random matrix with orthonormal rows or columns (whichever is fewer), scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for (j, d) in rdiag.iter().enumerate() {
        if *d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * q[(i, j)]);
        }
    }
    out
}

impl PolicyValueNet {
    /// Orthogonal init: gain sqrt(2) in the trunk, 0.01 on the policy head (near-uniform start),
    /// 1 on the value head; zero biases.
    pub fn new(input: usize, hidden: [usize; 2], actions: usize, rng: &mut impl Rng) -> Result<Self> {
        if input == 0 || actions == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter("network widths must be positive".into()));
        }
        let shapes = [(hidden[0], input), (hidden[1], hidden[0]), (actions, hidden[1]), (1, hidden[1])];
        let gains = [std::f64::consts::SQRT_2, std::f64::consts::SQRT_2, 0.01, 1.0];
        let mut offset = 0;
        let mut params = Vec::new();
        let layers = shapes.map(|(rows, cols)| {
            let d = Dense { rows, cols, offset };
            offset += d.len();
            d
        });
        for (d, g) in layers.iter().zip(gains) {
            params.extend(orthogonal(d.rows, d.cols, g, rng));
            params.extend(std::iter::repeat_n(0.0, d.rows));
        }
        Ok(Self { input, actions, layers, params })
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn n_actions(&self) -> usize {
        self.actions
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.layers[0].rows, self.layers[1].rows]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the policy head's parameters.
    pub fn policy_head(&self) -> std::ops::Range<usize> {
        let d = self.layers[2];
        d.offset..d.offset + d.len()
    }

    pub fn forward(&self, obs: &[f64]) -> Result<Forward> {
        if obs.len() != self.input {
            return Err(Error::InvalidParameter(format!(
                "observation has width {}, network expects {}",
                obs.len(),
                self.input
            )));
        }
        let p = &self.params;
        let mut h1 = Vec::new();
        self.layers[0].apply(p, obs, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = Vec::new();
        self.layers[1].apply(p, &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = Vec::new();
        self.layers[2].apply(p, &h2, &mut logits);
        let mut value = Vec::new();
        self.layers[3].apply(p, &h2, &mut value);
        let probs = softmax(&logits);
        Ok(Forward { input: obs.to_vec(), h1, h2, logits, probs, value: value[0] })
    }

    /// Adds the parameter gradient of a loss with `dL/dlogits` and `dL/dvalue` into `grad`.
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64], dvalue: f64, grad: &mut [f64]) {
        let p = &self.params;
        let mut dh2 = self.layers[2].backward(p, &fwd.h2, dlogits, grad);
        let dv = self.layers[3].backward(p, &fwd.h2, &[dvalue], grad);
        for ((d, v), h) in dh2.iter_mut().zip(dv).zip(&fwd.h2) {
            *d = (*d + v) * (1.0 - h * h);
        }
        let mut dh1 = self.layers[1].backward(p, &fwd.h1, &dh2, grad);
        for (d, h) in dh1.iter_mut().zip(&fwd.h1) {
            *d *= 1.0 - h * h;
        }
        self.layers[0].backward(p, &fwd.input, &dh1, grad);
    }
}
