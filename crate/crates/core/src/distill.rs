//! Student training on soft targets.
//!
//! The loss for one target distribution `q` and student posterior `p(.|x)` is
//! the cross-entropy `-sum_i q_i log p_i`. Every soft view of an example is
//! one contribution; with probability `hard_label_prob` an example instead
//! contributes a single one-hot term on its hard label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::targets::{SoftTargetFrame, TrainingExample};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Denominator floor of the gradient-check relative error, so parameters
/// with near-zero gradient are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("label {label} outside a {dim}-way distribution")]
    DimensionMismatch { label: usize, dim: usize },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("feature dimension {found} differs from model input {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// `-sum_i q_i ln max(p_i, PROB_FLOOR)` over the support of `q`.
pub fn kd_loss(q: &SoftTargetFrame, p: &[f64]) -> Result<f64, DistillError> {
    sparse_loss(q.entries().iter().map(|&(l, w)| (l as usize, w)), p)
}

/// Dense-target variant of [`kd_loss`]; `q` and `p` must have equal length.
pub fn kd_loss_dense(q: &[f64], p: &[f64]) -> Result<f64, DistillError> {
    if q.len() != p.len() {
        return Err(DistillError::DimensionMismatch {
            label: q.len().saturating_sub(1),
            dim: p.len(),
        });
    }
    sparse_loss(q.iter().copied().enumerate().filter(|e| e.1 != 0.0), p)
}

fn sparse_loss(q: impl Iterator<Item = (usize, f64)>, p: &[f64]) -> Result<f64, DistillError> {
    let mut loss = 0.0;
    for (label, w) in q {
        let pl = *p.get(label).ok_or(DistillError::DimensionMismatch { label, dim: p.len() })?;
        loss -= w * pl.max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

/// Entropy of a dense distribution (natural log).
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Fully connected network: tanh hidden layers, softmax output.
///
/// Parameters are stored flat, layer after layer, each layer as a row-major
/// `out x in` weight matrix followed by `out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl StudentModel {
    /// Xavier-uniform weights, zero biases.
    pub fn new(sizes: Vec<usize>, seed: u64) -> Result<Self, DistillError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(sizes, &mut rng)
    }

    fn init(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Self, DistillError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DistillError::InvalidConfig(format!("layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { sizes, params })
    }

    pub fn check(&self) -> Result<(), DistillError> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(DistillError::InvalidModel(format!("layer sizes {:?}", self.sizes)));
        }
        if self.params.len() != param_count(&self.sizes) {
            return Err(DistillError::InvalidModel(format!(
                "{} parameters for sizes {:?}",
                self.params.len(),
                self.sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_labels(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let input = &acts[l];
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// p(i|x).
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.activations(x).pop().expect("output layer");
        softmax(&logits)
    }

    pub fn argmax(&self, x: &[f64]) -> usize {
        argmax(&self.predict(x))
    }

    /// Adds `scale * d loss / d params` for one (input, target) pair to `grad`
    /// and returns the loss.
    fn accumulate(&self, x: &[f64], target: &[(usize, f64)], scale: f64, grad: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let logits = acts.last().expect("output layer");
        let log_p = log_softmax(logits);
        let floor = PROB_FLOOR.ln();

        // d/dz_j of -sum_{i unclamped} q_i log p_i = p_j * sum_{unclamped} q_i - q_j [j unclamped]
        let mut loss = 0.0;
        let mut live_mass = 0.0;
        let mut delta: Vec<f64> = vec![0.0; logits.len()];
        for &(label, q) in target {
            if log_p[label] > floor {
                loss -= q * log_p[label];
                live_mass += q;
                delta[label] -= q;
            } else {
                loss -= q * floor;
            }
        }
        for (d, lp) in delta.iter_mut().zip(&log_p) {
            *d += lp.exp() * live_mass;
        }

        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(start)
            })
            .collect();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o] * scale;
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                // tanh' = 1 - a^2
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        loss
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn sparse(dist: &SoftTargetFrame) -> Vec<(usize, f64)> {
    dist.entries().iter().map(|&(l, p)| (l as usize, p)).collect()
}

fn check_labels(target: &[(usize, f64)], dim: usize) -> Result<(), DistillError> {
    match target.iter().find(|e| e.0 >= dim) {
        Some(&(label, _)) => Err(DistillError::DimensionMismatch { label, dim }),
        None => Ok(()),
    }
}

/// Soft-view objective of a batch: mean over examples of the summed view losses.
pub fn batch_loss(model: &StudentModel, batch: &[TrainingExample]) -> Result<f64, DistillError> {
    let mut total = 0.0;
    for ex in batch {
        let p = model.predict(&ex.feat);
        for v in &ex.views {
            total += kd_loss(&v.dist, &p)?;
        }
    }
    let loss = total / batch.len().max(1) as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(DistillError::NonFiniteLoss)
    }
}

/// Analytic gradient of [`batch_loss`].
pub fn batch_gradient(model: &StudentModel, batch: &[TrainingExample]) -> Result<Vec<f64>, DistillError> {
    let mut grad = vec![0.0; model.params.len()];
    let scale = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        check_dim(model, &ex.feat)?;
        for v in &ex.views {
            let t = sparse(&v.dist);
            check_labels(&t, model.num_labels())?;
            model.accumulate(&ex.feat, &t, scale, &mut grad);
        }
    }
    Ok(grad)
}

fn check_dim(model: &StudentModel, feat: &[f64]) -> Result<(), DistillError> {
    if feat.len() != model.input_dim() {
        return Err(DistillError::FeatureDim {
            expected: model.input_dim(),
            found: feat.len(),
        });
    }
    Ok(())
}

/// Compares the analytic gradient of the soft-view objective against central
/// finite differences; returns the largest relative error over all parameters.
pub fn grad_check(model: &StudentModel, batch: &[TrainingExample], epsilon: f64) -> Result<f64, DistillError> {
    let analytic = batch_gradient(model, batch)?;
    grad_check_against(model, batch, epsilon, &analytic)
}

/// Like [`grad_check`] but against a caller-supplied analytic gradient.
pub fn grad_check_against(
    model: &StudentModel,
    batch: &[TrainingExample],
    epsilon: f64,
    analytic: &[f64],
) -> Result<f64, DistillError> {
    if !(epsilon > 0.0) {
        return Err(DistillError::InvalidConfig(format!("epsilon {epsilon}")));
    }
    if analytic.len() != model.params.len() {
        return Err(DistillError::InvalidConfig("gradient length".into()));
    }
    batch_loss(model, batch)?;
    let errors: Vec<f64> = (0..model.params.len())
        .into_par_iter()
        .map(|i| {
            let mut m = model.clone();
            let orig = m.params[i];
            m.params[i] = orig + epsilon;
            let up = batch_loss(&m, batch)?;
            m.params[i] = orig - epsilon;
            let down = batch_loss(&m, batch)?;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i];
            Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR))
        })
        .collect::<Result<_, DistillError>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Per example per epoch: probability the hard label replaces all soft views.
    pub hard_label_prob: f64,
    pub hidden: Vec<usize>,
    /// Output size; inferred from the largest label in the manifest when `None`.
    pub num_labels: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            hard_label_prob: 0.5,
            hidden: vec![32, 32],
            num_labels: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.hard_label_prob) {
            return bad("hard_label_prob must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer of width 0");
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

/// A frame with its reference label, for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub feat: Vec<f64>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub trace: Vec<TraceRecord>,
}

fn infer_labels(manifest: &[TrainingExample]) -> usize {
    manifest
        .iter()
        .flat_map(|ex| {
            std::iter::once(ex.hard).chain(ex.views.iter().flat_map(|v| v.dist.entries().iter().map(|e| e.0)))
        })
        .max()
        .map_or(1, |m| m as usize + 1)
}

/// Mini-batch SGD over the manifest. Bit-deterministic for a given seed.
///
/// `loss` in the trace is the epoch mean of the per-example objective that
/// was actually optimized (after hard/soft switching).
pub fn train_student(
    manifest: &[TrainingExample],
    cfg: &TrainConfig,
    eval: Option<&[LabeledFrame]>,
) -> Result<TrainOutcome, DistillError> {
    cfg.validate()?;
    let first = manifest.first().ok_or(DistillError::EmptyManifest)?;
    let num_labels = cfg.num_labels.unwrap_or_else(|| infer_labels(manifest));
    let mut sizes = vec![first.feat.len()];
    sizes.extend(&cfg.hidden);
    sizes.push(num_labels);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = StudentModel::init(sizes, &mut rng)?;
    let targets: Vec<(usize, Vec<Vec<(usize, f64)>>)> = manifest
        .iter()
        .map(|ex| {
            check_dim(&model, &ex.feat)?;
            let hard = ex.hard as usize;
            let views: Vec<_> = ex.views.iter().map(|v| sparse(&v.dist)).collect();
            check_labels(&[(hard, 1.0)], num_labels)?;
            views.iter().try_for_each(|t| check_labels(t, num_labels))?;
            Ok((hard, views))
        })
        .collect::<Result<_, DistillError>>()?;

    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (hard, views) = &targets[i];
                let use_hard = rng.random::<f64>() < cfg.hard_label_prob;
                if use_hard {
                    epoch_loss += model.accumulate(&manifest[i].feat, &[(*hard, 1.0)], scale, &mut grad);
                } else {
                    for t in views {
                        epoch_loss += model.accumulate(&manifest[i].feat, t, scale, &mut grad);
                    }
                }
            }
            model
                .params
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= cfg.learning_rate * g);
        }
        let loss = epoch_loss / manifest.len() as f64;
        if !loss.is_finite() {
            return Err(DistillError::NonFiniteLoss);
        }
        let eval_acc = match eval {
            Some(frames) => Some(eval_accuracy(&model, frames)?),
            None => None,
        };
        trace.push(TraceRecord { epoch, loss, eval_acc });
    }
    Ok(TrainOutcome { model, trace })
}

/// Fraction of frames whose argmax prediction equals the reference label.
pub fn eval_accuracy(model: &StudentModel, frames: &[LabeledFrame]) -> Result<f64, DistillError> {
    if frames.is_empty() {
        return Err(DistillError::EmptyEvalSet);
    }
    for f in frames {
        check_dim(model, &f.feat)?;
    }
    let correct = frames
        .par_iter()
        .filter(|f| model.argmax(&f.feat) == f.label as usize)
        .count();
    Ok(correct as f64 / frames.len() as f64)
}
