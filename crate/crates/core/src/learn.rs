//! Small gradient-trained binary classifiers shared by the segment scorer
//! and the ensemble: logistic regression, a one-hidden-layer perceptron and
//! a linear max-margin classifier (hinge loss with L2 penalty).
//!
//! All three expose the same flat weight vector so that loss and gradient
//! can be checked against finite differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial weights are drawn uniformly from `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Sigmoid of an affine function, binary cross-entropy loss.
    Logistic,
    /// `tanh` hidden layer followed by a sigmoid output, binary cross-entropy loss.
    Mlp { hidden: usize },
    /// Affine margin, mean hinge loss plus `l2 / 2 * |w|^2` (bias excluded).
    LinearSvm { l2: f64 },
}

impl Architecture {
    pub fn parameter_count(&self, input_dim: usize) -> usize {
        match *self {
            Architecture::Logistic | Architecture::LinearSvm { .. } => input_dim + 1,
            Architecture::Mlp { hidden } => hidden * input_dim + hidden + hidden + 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Logistic => "logistic",
            Architecture::Mlp { .. } => "mlp",
            Architecture::LinearSvm { .. } => "svm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Per-epoch full-dataset losses; `losses[0]` is the loss at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub weights: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln s(z) + (1-y) ln(1 - s(z))]` without overflow.
fn bce_from_logit(z: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()
}

impl Model {
    /// Seeded uniform initialization.
    pub fn init(architecture: Architecture, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..architecture.parameter_count(input_dim))
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self {
            architecture,
            input_dim,
            weights,
        }
    }

    pub fn zeros(architecture: Architecture, input_dim: usize) -> Self {
        Self {
            architecture,
            input_dim,
            weights: vec![0.0; architecture.parameter_count(input_dim)],
        }
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.weights.len());
        Self {
            weights,
            ..self.clone()
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Validation(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Raw output before the sigmoid: logit for the cross-entropy models,
    /// signed margin for the max-margin model.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.decision_unchecked(x))
    }

    fn decision_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.input_dim;
        match self.architecture {
            Architecture::Logistic | Architecture::LinearSvm { .. } => {
                dot(&self.weights[..d], x) + self.weights[d]
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.weights.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut z = b2[0];
                for j in 0..hidden {
                    let a = dot(&w1[j * d..(j + 1) * d], x) + b1[j];
                    z += w2[j] * a.tanh();
                }
                z
            }
        }
    }

    /// Score in `[0, 1]`: the sigmoid of [`Model::decision`]. A zero decision maps to 0.5.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(x)?))
    }

    /// Mean training objective over the rows.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        let n = xs.len().max(1) as f64;
        let data: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = self.decision_unchecked(x);
                match self.architecture {
                    Architecture::LinearSvm { .. } => {
                        let t = if y { 1.0 } else { -1.0 };
                        (1.0 - t * z).max(0.0)
                    }
                    _ => bce_from_logit(z, y),
                }
            })
            .sum::<f64>()
            / n;
        match self.architecture {
            Architecture::LinearSvm { l2 } => {
                let w = &self.weights[..self.input_dim];
                data + 0.5 * l2 * dot(w, w)
            }
            _ => data,
        }
    }

    /// Analytic gradient of [`Model::loss`] with respect to `weights`.
    pub fn gradient(&self, xs: &[Vec<f64>], ys: &[bool]) -> Vec<f64> {
        let d = self.input_dim;
        let n = xs.len().max(1) as f64;
        let mut grad = vec![0.0; self.weights.len()];
        match self.architecture {
            Architecture::Logistic => {
                for (x, &y) in xs.iter().zip(ys) {
                    let g = sigmoid(self.decision_unchecked(x)) - if y { 1.0 } else { 0.0 };
                    for (gi, xi) in grad[..d].iter_mut().zip(x) {
                        *gi += g * xi;
                    }
                    grad[d] += g;
                }
                grad.iter_mut().for_each(|g| *g /= n);
            }
            Architecture::LinearSvm { l2 } => {
                for (x, &y) in xs.iter().zip(ys) {
                    let t = if y { 1.0 } else { -1.0 };
                    if 1.0 - t * self.decision_unchecked(x) > 0.0 {
                        for (gi, xi) in grad[..d].iter_mut().zip(x) {
                            *gi -= t * xi;
                        }
                        grad[d] -= t;
                    }
                }
                grad.iter_mut().for_each(|g| *g /= n);
                for (gi, wi) in grad[..d].iter_mut().zip(&self.weights[..d]) {
                    *gi += l2 * wi;
                }
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.weights.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, _) = rest.split_at(hidden);
                let (o_b1, o_w2, o_b2) = (hidden * d, hidden * d + hidden, hidden * d + 2 * hidden);
                let mut act = vec![0.0; hidden];
                for (x, &y) in xs.iter().zip(ys) {
                    let mut z = self.weights[o_b2];
                    for j in 0..hidden {
                        act[j] = (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh();
                        z += w2[j] * act[j];
                    }
                    let g = sigmoid(z) - if y { 1.0 } else { 0.0 };
                    grad[o_b2] += g;
                    for j in 0..hidden {
                        grad[o_w2 + j] += g * act[j];
                        let gh = g * w2[j] * (1.0 - act[j] * act[j]);
                        grad[o_b1 + j] += gh;
                        for (gi, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gi += gh * xi;
                        }
                    }
                }
                grad.iter_mut().for_each(|g| *g /= n);
            }
        }
        grad
    }

    /// Minibatch gradient descent. The epoch order is reshuffled from `params.seed`.
    pub fn train(&mut self, xs: &[Vec<f64>], ys: &[bool], params: &TrainParams) -> Result<TrainReport> {
        if xs.len() != ys.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                xs.len(),
                ys.len()
            )));
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != self.input_dim) {
            return Err(Error::Validation(format!(
                "feature row has {} values, model expects {}",
                bad.len(),
                self.input_dim
            )));
        }
        let positives = ys.iter().filter(|&&y| y).count();
        if positives == 0 || positives == ys.len() {
            return Err(Error::Training(format!(
                "training data must contain both classes ({positives} positive of {})",
                ys.len()
            )));
        }
        // NaN fails the comparison too.
        let rate_ok = params.learning_rate > 0.0;
        if params.batch_size == 0 || !rate_ok {
            return Err(Error::Config(
                "batch size must be positive and learning rate > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut losses = vec![self.loss(xs, ys)];
        let mut bx: Vec<Vec<f64>> = Vec::with_capacity(params.batch_size);
        let mut by: Vec<bool> = Vec::with_capacity(params.batch_size);
        for epoch in 0..params.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(params.batch_size) {
                bx.clear();
                by.clear();
                for &i in chunk {
                    bx.push(xs[i].clone());
                    by.push(ys[i]);
                }
                let g = self.gradient(&bx, &by);
                for (w, gi) in self.weights.iter_mut().zip(&g) {
                    *w -= params.learning_rate * gi;
                }
            }
            let loss = self.loss(xs, ys);
            if !loss.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Training(format!(
                    "{} training diverged at epoch {} (loss {loss}, previous {}); \
                     lower the learning rate (currently {})",
                    self.architecture.name(),
                    epoch + 1,
                    losses.last().unwrap(),
                    params.learning_rate
                )));
            }
            losses.push(loss);
        }
        Ok(TrainReport { losses })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
