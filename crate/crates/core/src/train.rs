//! Minibatch Adam training, PGD adversarial training and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::autodiff::{cross_entropy, forward, predict};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Requires a model whose backbone is already frozen.
    pub head_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            head_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A trained model with its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    fit(model, ds, cfg, None)
}

/// Like [`train`], but every minibatch image is replaced by its PGD
/// perturbation against the current parameters before the gradient step.
pub fn adv_train(model: &Model, ds: &Dataset, atk: &AttackConfig, cfg: &TrainConfig) -> Result<Trained> {
    atk.validate()?;
    fit(model, ds, cfg, Some(atk))
}

struct Adam {
    step: i32,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<Vec<f64>>> = model
            .layers()
            .iter()
            .map(|l| l.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
            .collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Vec<Vec<f64>>], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            for (pi, param) in layer.params.iter_mut().enumerate() {
                if !param.trainable {
                    continue;
                }
                let g = &grads[li][pi];
                let m = &mut self.m[li][pi];
                let v = &mut self.v[li][pi];
                for (k, w) in param.value.data_mut().iter_mut().enumerate() {
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    *w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
                }
            }
        }
    }
}

fn fit(model: &Model, ds: &Dataset, cfg: &TrainConfig, atk: Option<&AttackConfig>) -> Result<Trained> {
    cfg.validate()?;
    let samples: Vec<&Sample> = ds.split(Split::Train).collect();
    if samples.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if cfg.head_only {
        let head = model.head_index();
        let backbone_trainable = model.layers()[..head]
            .iter()
            .any(|l| l.params.iter().any(|p| p.trainable));
        if backbone_trainable {
            return Err(Error::arg("head_only training requires a frozen backbone"));
        }
    }

    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let current = &model;
            let per_image: Vec<(f64, Vec<Vec<Tensor>>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let s = samples[idx];
                    let label = s.label.index();
                    let x = match atk {
                        Some(a) => {
                            let stream = ((epoch * samples.len() + b * cfg.batch_size + k) as u64) << 1;
                            attack::pgd_with_stream(current, &s.image, label, a, stream)?
                        }
                        None => s.image.clone(),
                    };
                    let (logits, tape) = forward(current, &x)?;
                    let (loss, dlogits) = cross_entropy(&logits, label);
                    let grads = tape.backward(current, &dlogits, false, true)?;
                    Ok((loss, grads.params))
                })
                .collect::<Result<_>>()?;

            // Reduce in index order so the sum is reproducible.
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Vec<Vec<f64>>> = model
                .layers()
                .iter()
                .map(|l| l.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
                .collect();
            for (loss, grads) in &per_image {
                total += loss;
                for (acc_l, g_l) in sum.iter_mut().zip(grads) {
                    for (acc, g) in acc_l.iter_mut().zip(g_l) {
                        for (a, v) in acc.iter_mut().zip(g.data()) {
                            *a += v * scale;
                        }
                    }
                }
            }
            adam.apply(&mut model, &sum, cfg);
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        epoch_losses.push(mean);
    }
    Ok(Trained { model, epoch_losses })
}

/// Predicted class per sample of a split, in dataset order.
pub fn predictions(model: &Model, ds: &Dataset, split: Split) -> Result<Vec<usize>> {
    let samples: Vec<&Sample> = ds.split(split).collect();
    samples
        .par_iter()
        .map(|s| Ok(predict(model, &s.image)?.argmax()))
        .collect()
}

/// Fraction of argmax-correct predictions on a split.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split) -> Result<f64> {
    let labels: Vec<usize> = ds.split(split).map(|s| s.label.index()).collect();
    if labels.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let preds = predictions(model, ds, split)?;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}
