//! Models, cross-entropy loss with L2 weight decay, analytic gradients and
//! local mini-batch SGD.
//!
//! Parameter layouts (row-major):
//! - logistic regression: `W[num_classes][input_dim]`, then `b[num_classes]`
//! - mlp: `W1[hidden][input_dim]`, `b1[hidden]`, `W2[num_classes][hidden]`,
//!   `b2[num_classes]`, with a tanh hidden layer

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Examples, Shard};
use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp,
}

fn default_hidden_dim() -> usize {
    32
}

fn default_weight_decay() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize, weight_decay: f64) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            input_dim,
            num_classes,
            hidden_dim: default_hidden_dim(),
            weight_decay,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, weight_decay: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
            weight_decay,
        }
    }

    pub fn num_params(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::LogisticRegression => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("model.weight_decay", "must be a nonnegative number"));
        }
        Ok(())
    }

    /// Starting point: zeros for logistic regression; for the MLP every
    /// weight and bias is uniform in `±1/sqrt(fan_in)` of its layer.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamVector {
        match self.kind {
            ModelKind::LogisticRegression => ParamVector::zeros(self.num_params()),
            ModelKind::Mlp => {
                let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
                let r1 = 1.0 / (d as f64).sqrt();
                let r2 = 1.0 / (h as f64).sqrt();
                let mut v = Vec::with_capacity(self.num_params());
                v.extend((0..h * d + h).map(|_| rng.random_range(-r1..=r1)));
                v.extend((0..c * h + c).map(|_| rng.random_range(-r2..=r2)));
                ParamVector::from_vec(v)
            }
        }
    }

    fn check<E: Examples + ?Sized>(&self, w: &ParamVector, data: &E) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::config(
                "model",
                format!(
                    "parameter vector has {} entries, model needs {}",
                    w.len(),
                    self.num_params()
                ),
            ));
        }
        if data.input_dim() != self.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!(
                    "data has {} features, model expects {}",
                    data.input_dim(),
                    self.input_dim
                ),
            ));
        }
        if data.is_empty() {
            return Err(Error::Data("no samples".into()));
        }
        if let Some(i) = (0..data.len()).find(|&i| data.label(i) >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {} at row {i} exceeds {} classes",
                data.label(i),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Class logits for one sample. `hidden` receives the tanh activations
    /// when the model has a hidden layer.
    fn logits(&self, w: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::LogisticRegression => {
                let (weights, bias) = w.split_at(c * d);
                for k in 0..c {
                    out[k] = bias[k] + dot(&weights[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    out[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }

    fn hidden_len(&self) -> usize {
        match self.kind {
            ModelKind::LogisticRegression => 0,
            ModelKind::Mlp => self.hidden_dim,
        }
    }

    /// Mean cross-entropy over `data` plus `(weight_decay / 2) * ||w||^2`.
    pub fn forward_loss<E: Examples + ?Sized>(&self, w: &ParamVector, data: &E) -> Result<f64> {
        self.check(w, data)?;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut logits = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for i in 0..data.len() {
            self.logits(w.as_slice(), data.row(i), &mut hidden, &mut logits);
            total += log_sum_exp(&logits) - logits[data.label(i)];
        }
        Ok(total / data.len() as f64 + 0.5 * self.weight_decay * w.squared_norm())
    }

    /// Analytic gradient of [`forward_loss`](Self::forward_loss).
    pub fn gradient<E: Examples + ?Sized>(&self, w: &ParamVector, data: &E) -> Result<ParamVector> {
        self.check(w, data)?;
        let mut grad = vec![0.0; w.len()];
        self.accumulate_gradient(w.as_slice(), data, &mut grad);
        Ok(ParamVector::from_vec(grad))
    }

    fn accumulate_gradient<E: Examples + ?Sized>(&self, w: &[f64], data: &E, grad: &mut [f64]) {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        let n = data.len() as f64;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut delta = vec![0.0; c];
        let mut delta_hidden = vec![0.0; self.hidden_len()];
        for i in 0..data.len() {
            let x = data.row(i);
            self.logits(w, x, &mut hidden, &mut delta);
            softmax_in_place(&mut delta);
            delta[data.label(i)] -= 1.0;
            delta.iter_mut().for_each(|v| *v /= n);
            match self.kind {
                ModelKind::LogisticRegression => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        axpy(&mut gw[k * d..(k + 1) * d], delta[k], x);
                        gb[k] += delta[k];
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &w[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    delta_hidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        axpy(&mut gw2[k * h..(k + 1) * h], delta[k], &hidden);
                        gb2[k] += delta[k];
                        axpy(&mut delta_hidden, delta[k], &w2[k * h..(k + 1) * h]);
                    }
                    for j in 0..h {
                        let dz = delta_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                        axpy(&mut gw1[j * d..(j + 1) * d], dz, x);
                        gb1[j] += dz;
                    }
                }
            }
        }
        for (g, p) in grad.iter_mut().zip(w) {
            *g += self.weight_decay * p;
        }
    }

    /// Predicted class; ties go to the lowest class index.
    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut logits = vec![0.0; self.num_classes];
        self.logits(w.as_slice(), x, &mut hidden, &mut logits);
        argmax(&logits)
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn accuracy<E: Examples + ?Sized>(&self, w: &ParamVector, data: &E) -> Result<f64> {
        self.check(w, data)?;
        let mut hidden = vec![0.0; self.hidden_len()];
        let mut logits = vec![0.0; self.num_classes];
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.logits(w.as_slice(), data.row(i), &mut hidden, &mut logits);
            if argmax(&logits) == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch order for one client: batches are drawn without replacement
/// from a shuffled epoch; a fresh permutation is drawn when fewer than a full
/// batch remains. Batches never exceed the shard size.
pub struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSchedule {
    pub fn new<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchSchedule {
            order,
            cursor: 0,
            batch: batch_size.clamp(1, n.max(1)),
        }
    }

    pub fn next_batch<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

/// `K` steps of mini-batch SGD from `w0` on `shard`.
pub fn local_sgd<R: Rng>(
    model: &ModelSpec,
    w0: &ParamVector,
    shard: &Shard,
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    local_sgd_corrected(model, w0, shard, steps, lr, batch_size, None, rng)
}

/// Local SGD where each stochastic gradient is shifted by `correction`
/// (`c - c_i` for control-variate methods).
#[allow(clippy::too_many_arguments)]
pub fn local_sgd_corrected<R: Rng>(
    model: &ModelSpec,
    w0: &ParamVector,
    shard: &Shard,
    steps: usize,
    lr: f64,
    batch_size: usize,
    correction: Option<&ParamVector>,
    rng: &mut R,
) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(Error::Data("local training on an empty shard".into()));
    }
    if steps == 0 {
        return Err(Error::config("local_steps", "must be at least 1"));
    }
    model.check(w0, shard)?;
    if let Some(c) = correction {
        if c.len() != w0.len() {
            return Err(Error::config("model", "correction length differs from model"));
        }
    }
    let mut w = w0.clone();
    let mut grad = vec![0.0; w.len()];
    let mut schedule = BatchSchedule::new(shard.len(), batch_size, rng);
    for _ in 0..steps {
        let batch = schedule.next_batch(rng);
        grad.iter_mut().for_each(|g| *g = 0.0);
        model.accumulate_gradient(w.as_slice(), &shard.subset(batch), &mut grad);
        if let Some(c) = correction {
            axpy(&mut grad, 1.0, c.as_slice());
        }
        axpy(w.as_mut_slice(), -lr, &grad);
    }
    Ok(w)
}
