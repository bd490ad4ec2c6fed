//! Full-batch toy training on a synthetic classification set.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{Mode, Module};
use crate::model::config::ModelConfig;
use crate::model::network::Model;
use crate::optim::{Optimizer, UpdateRule};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Images `(n, channels, size, size)` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of the per-sample noise added to a class prototype.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 32,
            classes: 8,
            channels: 3,
            size: 56,
            noise: 0.5,
        }
    }
}

/// Each class has a unit-normal prototype image; sample `i` has class
/// `i % classes` and is its prototype plus Gaussian noise.
pub fn synthetic_dataset<T: Element>(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Dataset<T>> {
    if spec.classes == 0 || spec.samples < spec.classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one sample per class, got {} samples for {} classes",
            spec.samples, spec.classes
        )));
    }
    let plane = spec.channels * spec.size * spec.size;
    let protos: Vec<f64> = (0..spec.classes * plane).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    let images = Tensor::from_fn([spec.samples, spec.channels, spec.size, spec.size], |i| {
        let (n, k) = (i / plane, i % plane);
        T::of(protos[labels[n] * plane + k] + spec.noise * rng.normal())
    })?;
    Ok(Dataset {
        images,
        labels,
        classes: spec.classes,
    })
}

/// Dataset and freshly initialized model for one seed; the two draw from
/// independent forks of `Rng::new(seed)`.
pub fn toy_setup<T: Element>(cfg: &ModelConfig, spec: &SyntheticSpec, seed: u64) -> Result<(Model<T>, Dataset<T>)> {
    let root = Rng::new(seed);
    let data = synthetic_dataset(spec, &mut root.fork(0))?;
    let model = Model::new(cfg, &mut root.fork(1))?;
    Ok((model, data))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop once the eval-mode accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Evaluate every this many steps (and after the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            weight_decay: 0.05,
            target_accuracy: Some(0.95),
            eval_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Accuracy of the train-mode logits of this step, before the update.
    pub batch_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub reached_target_at: Option<usize>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over consecutive windows of `width` steps.
    pub fn windowed_losses(&self, width: usize) -> Vec<f64> {
        self.losses()
            .chunks(width.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..classes)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    Ok(accuracy(&model.predict(&data.images)?, &data.labels))
}

/// One full-batch AdamW step; returns `(loss, batch accuracy)`.
pub fn train_step<T: Element>(model: &mut Model<T>, data: &Dataset<T>, opt: &mut Optimizer<T>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.constant(data.images.clone())?;
    let logits = model.forward(&mut g, x, Mode::Train)?;
    let acc = accuracy(g.value(logits), &data.labels);
    let loss = g.cross_entropy(logits, &data.labels)?;
    let loss_value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let updates = g.take_stat_updates();
    opt.step(model.params_mut(), &grads)?;
    model.apply_stat_updates(&updates)?;
    Ok((loss_value, acc))
}

/// Train until `cfg.steps` or the target accuracy; `on_step` sees every log entry.
pub fn train<T: Element>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    let mut opt = Optimizer::new(UpdateRule::adamw(cfg.lr, cfg.weight_decay));
    let mut log = Vec::with_capacity(cfg.steps);
    let mut reached = None;
    let mut final_accuracy = None;
    for step in 1..=cfg.steps {
        let (loss, batch_accuracy) = train_step(model, data, &mut opt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let eval_accuracy = if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            Some(evaluate(model, data)?)
        } else {
            None
        };
        let entry = StepLog {
            step,
            loss,
            batch_accuracy,
            eval_accuracy,
        };
        on_step(&entry);
        log.push(entry);
        if let Some(acc) = eval_accuracy {
            final_accuracy = Some(acc);
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                reached = Some(step);
                break;
            }
        }
    }
    let final_accuracy = match final_accuracy {
        Some(a) => a,
        None => evaluate(model, data)?,
    };
    Ok(TrainReport {
        steps_run: log.len(),
        log,
        final_accuracy,
        reached_target_at: reached,
    })
}
