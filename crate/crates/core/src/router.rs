//! Routing stage of the cascade: predicts the TLC of a query embedding.
//!
//! [`SoftmaxRouter`] is a multinomial logistic regression trained by plain
//! mini-batch gradient descent on query-domain embeddings. [`OracleRouter`]
//! returns the true TLC with a fixed probability and exists to study how
//! routing accuracy alone affects retrieval.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{EmbeddingMatrix, TlcId};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 40,
            batch_size: 32,
            l2_lambda: 0.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear softmax classifier over embeddings. Weights are `C × dim`,
/// row-major, one row per entry of `class_labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRouter {
    pub class_labels: Vec<TlcId>,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-training-set objective before the first epoch.
    pub initial_loss: f64,
    /// Full-training-set objective after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = math::exp(*z - max);
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

impl SoftmaxRouter {
    /// All-zero router over the given labels.
    pub fn zeros(mut class_labels: Vec<TlcId>, dim: usize) -> Result<Self> {
        class_labels.sort_unstable();
        let before = class_labels.len();
        class_labels.dedup();
        if class_labels.len() != before {
            return Err(Error::Argument("class labels must be distinct".into()));
        }
        if class_labels.is_empty() {
            return Err(Error::EmptyInput("router needs at least one class"));
        }
        if dim == 0 {
            return Err(Error::EmptyInput("router dimension is zero"));
        }
        let c = class_labels.len();
        Ok(SoftmaxRouter {
            class_labels,
            dim,
            weights: vec![0.0; c * dim],
            bias: vec![0.0; c],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Structural check for routers read from outside.
    pub fn validate(&self) -> Result<()> {
        let c = self.class_labels.len();
        if c == 0 || self.dim == 0 {
            return Err(Error::EmptyInput("router has no classes or zero dimension"));
        }
        if self.class_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "class labels must be distinct and ascending".into(),
            ));
        }
        if self.weights.len() != c * self.dim || self.bias.len() != c {
            return Err(Error::Argument("router parameter shapes are inconsistent".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|x| !x.is_finite()) {
            return Err(Error::Argument("router parameters must be finite".into()));
        }
        Ok(())
    }

    fn class_index(&self, label: TlcId) -> Result<usize> {
        self.class_labels
            .binary_search(&label)
            .map_err(|_| Error::UnknownLabel(label))
    }

    fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        for (c, z) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            let mut acc = self.bias[c];
            for (w, &xi) in row.iter().zip(x) {
                acc += w * xi as f64;
            }
            *z = acc;
        }
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("input has non-finite components".into()));
        }
        Ok(())
    }

    /// Class probabilities, aligned with `class_labels`.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut p = vec![0.0; self.num_classes()];
        self.logits_into(x, &mut p);
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// The `m` most probable classes, probability descending and label
    /// ascending on ties.
    pub fn predict_top_m(&self, x: &[f32], m: usize) -> Result<Vec<(TlcId, f64)>> {
        if m == 0 {
            return Err(Error::Argument("route_top_m must be >= 1".into()));
        }
        let p = self.predict_proba(x)?;
        Ok(top_m(&self.class_labels, &p, m))
    }

    /// Mean cross-entropy plus `(λ/2)·‖W‖²`, with exact gradients.
    pub fn loss_and_grad(&self, rows: &[&[f32]], labels: &[TlcId], l2_lambda: f64) -> Result<LossGrad> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("loss over an empty batch"));
        }
        if rows.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let c = self.num_classes();
        let d = self.dim;
        let mut grad_weights = vec![0.0; c * d];
        let mut grad_bias = vec![0.0; c];
        let mut logits = vec![0.0; c];
        let mut data_loss = 0.0;
        for (x, &label) in rows.iter().zip(labels) {
            if x.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: x.len(),
                });
            }
            let y = self.class_index(label)?;
            self.logits_into(x, &mut logits);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(logits.iter().map(|z| math::exp(z - max)).sum::<f64>());
            data_loss += lse - logits[y];
            for k in 0..c {
                let delta = math::exp(logits[k] - lse) - if k == y { 1.0 } else { 0.0 };
                grad_bias[k] += delta;
                let g = &mut grad_weights[k * d..(k + 1) * d];
                for (gi, &xi) in g.iter_mut().zip(x.iter()) {
                    *gi += delta * xi as f64;
                }
            }
        }
        let n = rows.len() as f64;
        let mut reg = 0.0;
        for (g, w) in grad_weights.iter_mut().zip(&self.weights) {
            *g = *g / n + l2_lambda * w;
            reg += w * w;
        }
        for g in grad_bias.iter_mut() {
            *g /= n;
        }
        Ok(LossGrad {
            loss: data_loss / n + 0.5 * l2_lambda * reg,
            grad_weights,
            grad_bias,
        })
    }

    /// Fraction of rows whose top-1 prediction equals the label.
    pub fn accuracy(&self, rows: &[&[f32]], labels: &[TlcId]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, &y) in rows.iter().zip(labels) {
            if self.predict_top_m(x, 1)?[0].0 == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / rows.len() as f64)
    }
}

pub(crate) fn top_m(labels: &[TlcId], probs: &[f64], m: usize) -> Vec<(TlcId, f64)> {
    let mut ranked: Vec<(TlcId, f64)> = labels.iter().copied().zip(probs.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(m);
    ranked
}

/// Trains a router from zero initialization with seeded shuffled
/// mini-batches. `labels[i]` is the TLC of row `i`.
pub fn train(
    features: &EmbeddingMatrix,
    labels: &[TlcId],
    config: &TrainConfig,
) -> Result<(SoftmaxRouter, TrainReport)> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateTraining);
    }
    let mut router = SoftmaxRouter::zeros(classes, features.dim())?;
    let rows: Vec<&[f32]> = (0..features.len()).map(|i| features.row(i)).collect();
    let objective = |r: &SoftmaxRouter| r.loss_and_grad(&rows, labels, config.l2_lambda).map(|lg| lg.loss);

    let initial_loss = objective(&router)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut batch_rows: Vec<&[f32]> = Vec::with_capacity(config.batch_size);
    let mut batch_labels: Vec<TlcId> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_rows.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_rows.push(rows[i]);
                batch_labels.push(labels[i]);
            }
            let g = router.loss_and_grad(&batch_rows, &batch_labels, config.l2_lambda)?;
            for (w, gw) in router.weights.iter_mut().zip(&g.grad_weights) {
                *w -= config.learning_rate * gw;
            }
            for (b, gb) in router.bias.iter_mut().zip(&g.grad_bias) {
                *b -= config.learning_rate * gb;
            }
        }
        epoch_losses.push(objective(&router)?);
    }
    Ok((
        router,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Seeded split of `0..n`: shuffle, then hold out the last
/// `⌈holdout·n⌉` positions. Returns `(train, held_out)`.
pub fn holdout_split(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_out = libm::ceil(holdout.clamp(0.0, 1.0) * n as f64) as usize;
    let held = order.split_off(n - n_out);
    (order, held)
}

/// Synthetic router that is right with probability `accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRouter {
    pub accuracy: f64,
    pub class_labels: Vec<TlcId>,
    pub seed: u64,
}

impl OracleRouter {
    pub fn new(accuracy: f64, mut class_labels: Vec<TlcId>, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Config(format!("oracle accuracy {accuracy} outside [0, 1]")));
        }
        class_labels.sort_unstable();
        class_labels.dedup();
        if class_labels.is_empty() {
            return Err(Error::Config("oracle router needs at least one class".into()));
        }
        if class_labels.len() == 1 && accuracy < 1.0 {
            return Err(Error::Config(
                "oracle with one class cannot be wrong; accuracy must be 1".into(),
            ));
        }
        Ok(OracleRouter {
            accuracy,
            class_labels,
            seed,
        })
    }

    /// Returns `true_tlc` with probability `accuracy`, otherwise a uniform
    /// pick among the remaining labels.
    pub fn predict<R: RngCore + ?Sized>(&self, true_tlc: TlcId, rng: &mut R) -> Result<TlcId> {
        let pos = self
            .class_labels
            .binary_search(&true_tlc)
            .map_err(|_| Error::UnknownLabel(true_tlc))?;
        let u: f64 = rng.random();
        if u < self.accuracy {
            return Ok(true_tlc);
        }
        let mut j = rng.random_range(0..self.class_labels.len() - 1);
        if j >= pos {
            j += 1;
        }
        Ok(self.class_labels[j])
    }

    /// Independent stream for the query identified by `key`.
    pub fn stream_for(&self, key: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }

    /// Routes to the oracle's pick first, then the remaining labels in
    /// ascending order; the pick carries probability 1.
    pub fn route(&self, true_tlc: TlcId, key: u64, m: usize) -> Result<Vec<(TlcId, f64)>> {
        if m == 0 {
            return Err(Error::Argument("route_top_m must be >= 1".into()));
        }
        let pick = self.predict(true_tlc, &mut self.stream_for(key))?;
        let mut out = vec![(pick, 1.0)];
        out.extend(
            self.class_labels
                .iter()
                .filter(|&&l| l != pick)
                .map(|&l| (l, 0.0))
                .take(m - 1),
        );
        Ok(out)
    }
}
