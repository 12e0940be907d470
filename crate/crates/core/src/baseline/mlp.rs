//! Small fully connected network with hand-written backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Self::Tanh => v.tanh(),
            Self::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(&self, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-feature affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Column statistics of `rows`; constant columns get unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidConfig("cannot fit normalization to no samples".into()));
        }
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let norm = Self { mean, std };
        norm.validate()?;
        Ok(norm)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::InvalidConfig("normalization mean/std lengths differ".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig(
                "normalization stats must be finite with std > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform Glorot initialization from the seeded generator.
    Xavier,
    Zeros,
}

/// Network `g_beta` mapping normalized inputs to normalized outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activation: Activation,
    /// Per layer: weight matrix `out x in` and bias.
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
}

/// Serialized network: layer sizes, flat weights and normalization stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
}

/// Per-layer gradients, same layout as the model's layers.
pub type Gradients = Vec<(DMatrix<f64>, DVector<f64>)>;

impl MlpModel {
    pub fn new(sizes: Vec<usize>, activation: Activation, init: Init, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = match init {
                    Init::Xavier => DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit)),
                    Init::Zeros => DMatrix::zeros(fan_out, fan_in),
                };
                (weight, DVector::zeros(fan_out))
            })
            .collect();
        let (n_in, n_out) = (sizes[0], *sizes.last().unwrap());
        Ok(Self {
            sizes,
            activation,
            layers,
            input_norm: Normalization::identity(n_in),
            output_norm: Normalization::identity(n_out),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [(DMatrix<f64>, DVector<f64>)] {
        &mut self.layers
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            // Row-major weights, then bias.
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    fn set_flat_weights(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().map(|(w, b)| w.len() + b.len()).sum();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "checkpoint weight count",
                expected,
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for (w, b) in &mut self.layers {
            let (rows, cols) = w.shape();
            *w = DMatrix::from_row_slice(rows, cols, &flat[at..at + rows * cols]);
            at += rows * cols;
            *b = DVector::from_column_slice(&flat[at..at + rows]);
            at += rows;
        }
        Ok(())
    }

    /// Forward pass on a batch of normalized inputs (one sample per column);
    /// returns every layer's activations, input first.
    pub(crate) fn forward_batch(&self, x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if i < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            acts.push(z);
        }
        acts
    }

    /// Parameter gradients given `d loss / d output` and the cached activations.
    pub(crate) fn backward_batch(&self, acts: &[DMatrix<f64>], out_grad: DMatrix<f64>) -> Gradients {
        let mut delta = out_grad;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &acts[i];
            let gw = &delta * input.transpose();
            let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            if i > 0 {
                let mut next = self.layers[i].0.transpose() * &delta;
                next.zip_apply(input, |d, a| *d *= self.activation.derivative(a));
                delta = next;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        grads
    }

    /// Raw-unit prediction.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let xn = DMatrix::from_column_slice(x.len(), 1, &self.input_norm.normalize(x));
        let out = self.forward_batch(xn).pop().unwrap();
        self.output_norm.denormalize(out.as_slice())
    }

    /// Raw-unit predictions for many inputs at once.
    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if rows.is_empty() {
            return Vec::new();
        }
        let mut x = DMatrix::zeros(self.input_dim(), rows.len());
        for (c, r) in rows.iter().enumerate() {
            x.column_mut(c).copy_from_slice(&self.input_norm.normalize(r));
        }
        let out = self.forward_batch(x).pop().unwrap();
        out.column_iter()
            .map(|c| self.output_norm.denormalize(c.as_slice()))
            .collect()
    }

    /// `d output / d input` in raw units, `out x in`.
    pub fn input_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let xn = DMatrix::from_column_slice(x.len(), 1, &self.input_norm.normalize(x));
        let acts = self.forward_batch(xn);
        let mut jac = DMatrix::from_diagonal(&DVector::from_iterator(
            x.len(),
            self.input_norm.std.iter().map(|s| 1.0 / s),
        ));
        let last = self.layers.len() - 1;
        for (i, (w, _)) in self.layers.iter().enumerate() {
            jac = w * jac;
            if i < last {
                let a = &acts[i + 1];
                for (r, mut row) in jac.row_iter_mut().enumerate() {
                    row *= self.activation.derivative(a[(r, 0)]);
                }
            }
        }
        for (r, mut row) in jac.row_iter_mut().enumerate() {
            row *= self.output_norm.std[r];
        }
        jac
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            sizes: self.sizes.clone(),
            activation: self.activation,
            weights: self.flat_weights(),
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
        }
    }

    pub fn from_checkpoint(source: &str, ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(
                source,
                format!("unsupported checkpoint version {}", ck.format_version),
            ));
        }
        let mut model = Self::new(ck.sizes.clone(), ck.activation, Init::Zeros, &mut crate::seed::rng(0))?;
        model.set_flat_weights(&ck.weights)?;
        ck.input_norm.validate()?;
        ck.output_norm.validate()?;
        if ck.input_norm.dim() != model.input_dim() || ck.output_norm.dim() != model.output_dim() {
            return Err(Error::parse(source, "normalization size does not match layer sizes"));
        }
        model.input_norm = ck.input_norm;
        model.output_norm = ck.output_norm;
        Ok(model)
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(source: &str, text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::parse(source, e))?;
        Self::from_checkpoint(source, ck)
    }
}
