//! Teacher-forced next-intent training with Adam, gradient clipping and
//! early stopping on validation Recall@1.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Recalls};
use crate::model::{Dropout, Model};
use crate::numerics::{Graph, ParamStore};
use crate::pipeline::TokenizedSample;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Users per optimizer step.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub gradient_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 50,
            early_stop_patience: 5,
            gradient_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and epsilon > 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size, eval_every and early_stop_patience must be at least 1".into()));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return Err(Error::Config("gradient_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update from the accumulated gradients.
    pub fn update(&mut self, params: &mut ParamStore, c: &TrainConfig) {
        self.t += 1;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
                *x -= c.learning_rate * step;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean cross-entropy over the batch's supervised positions.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Gradients of every sample accumulate against the batch's total count of
/// supervised positions, so the step sees the batch-mean cross-entropy.
pub fn train_step(
    model: &mut Model,
    batch: &[&TokenizedSample],
    adam: &mut Adam,
    config: &TrainConfig,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepOutcome> {
    let denom: usize = batch.iter().map(|s| s.n_supervised()).sum();
    if denom == 0 {
        return Err(Error::Contract("batch has no supervised positions".into()));
    }
    model.params.zero_grads();
    let rate = model.config.dropout;
    let mut loss = 0.0;
    for s in batch {
        let grads = {
            let mut g = Graph::new(&model.params);
            let mut drop = Dropout::train(rate, dropout_rng);
            let l = model.loss(&mut g, s, &mut drop, denom as f64)?;
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    loss: value,
                    sample: format!("user {}", s.user_id),
                });
            }
            loss += value;
            g.backward(l)?
        };
        model.params.accumulate(&grads)?;
    }
    let grad_norm = model.params.grad_norm();
    if grad_norm > config.gradient_clip_norm {
        model.params.scale_grads(config.gradient_clip_norm / grad_norm);
    }
    adam.update(&mut model.params, config);
    Ok(StepOutcome { loss, grad_norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub val_recall_1: f64,
    pub val_recall_5: f64,
    pub val_recall_10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<MetricsRow>,
    pub best_step: usize,
    pub best_val_recall_1: Option<f64>,
    pub steps_run: usize,
}

const SHUFFLE_STREAM: u64 = 0x5_0001;
const DROPOUT_STREAM: u64 = 0x5_0002;

fn snapshot(params: &ParamStore) -> Vec<Vec<f64>> {
    params.ids().map(|id| params.get(id).data().to_vec()).collect()
}

fn restore(params: &mut ParamStore, values: &[Vec<f64>]) {
    let ids: Vec<_> = params.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        params.get_mut(id).data_mut().copy_from_slice(v);
    }
}

/// Trains with per-epoch shuffling, evaluates validation recall every
/// `eval_every` steps and once more at the end, and leaves the model at its
/// best validation Recall@1. Aborts when the windowed training loss exceeds
/// ten times the first step's loss for three consecutive evaluations.
pub fn run_training(
    model: &mut Model,
    train: &[TokenizedSample],
    validation: &[TokenizedSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let usable: Vec<&TokenizedSample> = train.iter().filter(|s| s.n_supervised() > 0).collect();
    if usable.is_empty() || validation.iter().all(|s| s.n_supervised() == 0) {
        return Err(Error::Config("training and validation splits must have supervised positions".into()));
    }
    let mut shuffle_rng = stream(config.seed, &[SHUFFLE_STREAM]);
    let mut dropout_rng = stream(config.seed, &[DROPOUT_STREAM]);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<&TokenizedSample> = Vec::new();
    let mut cursor = 0;

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let mut stale = 0;
    let mut diverging = 0;
    let mut initial_loss = None;
    let mut window = Vec::new();
    let mut step = 0;

    while step < config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order = usable.clone();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let out = train_step(model, &batch, &mut adam, config, &mut dropout_rng)?;
        step += 1;
        initial_loss.get_or_insert(out.loss);
        window.push(out.loss);

        if step % config.eval_every != 0 && step != config.max_steps {
            continue;
        }
        let r = evaluate(model, validation, &[1, 5, 10])?;
        let train_loss = window.iter().sum::<f64>() / window.len() as f64;
        window.clear();
        log.push(metrics_row(step, train_loss, &r));
        let r1 = r.values[0];
        if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
            best = Some((r1, step, snapshot(&model.params)));
            stale = 0;
        } else {
            stale += 1;
        }
        let first = initial_loss.unwrap_or(train_loss);
        diverging = if train_loss > 10.0 * first { diverging + 1 } else { 0 };
        if diverging >= 3 {
            return Err(Error::Diverged(format!(
                "training loss {train_loss:.4} exceeded 10x the initial {first:.4} for 3 evaluations (step {step})"
            )));
        }
        if stale >= config.early_stop_patience {
            break;
        }
    }

    let (best_val_recall_1, best_step) = match best {
        Some((r, s, values)) => {
            restore(&mut model.params, &values);
            (Some(r), s)
        }
        None => (None, 0),
    };
    Ok(TrainOutcome {
        log,
        best_step,
        best_val_recall_1,
        steps_run: step,
    })
}

fn metrics_row(step: usize, train_loss: f64, r: &Recalls) -> MetricsRow {
    MetricsRow {
        step,
        train_loss,
        val_recall_1: r.values[0],
        val_recall_5: r.values[1],
        val_recall_10: r.values[2],
    }
}

#[cfg(test)]
mod tests;
