//! Minibatch training loop shared by every training phase.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelGraph};
use crate::optim::{MomentumSgd, SgdConfig};
use crate::tensor::Tensor;

/// A differentiable per-batch loss over a fixed set of training samples.
pub trait Objective {
    /// Number of samples the loop draws batches from.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hook run before each epoch with the current weights.
    fn begin_epoch(&mut self, _model: &ModelGraph, _epoch: usize) -> Result<()> {
        Ok(())
    }

    /// Records the scalar loss for `batch` on `tape`.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        model: &ModelGraph,
        bound: &BoundParams,
        batch: &[usize],
    ) -> Result<Var>;
}

/// Cross-entropy over `inputs` fed into layer position `start`. With
/// `start > 0` the inputs are cached activations of a frozen prefix.
#[derive(Debug, Clone)]
pub struct Classification {
    inputs: Tensor,
    labels: Vec<usize>,
    start: usize,
}

impl Classification {
    pub fn new(data: &LabeledDataset) -> Self {
        Classification {
            inputs: data.images().clone(),
            labels: data.labels().to_vec(),
            start: 0,
        }
    }

    /// Precomputes activations of every frozen leading layer so each step
    /// only runs the trainable suffix.
    pub fn with_frozen_prefix(model: &ModelGraph, data: &LabeledDataset) -> Result<Self> {
        let start = model.layers().iter().take_while(|l| l.frozen).count();
        let inputs = if start == 0 {
            data.images().clone()
        } else {
            model.forward_range(data.images(), 0..start)?
        };
        Ok(Classification {
            inputs,
            labels: data.labels().to_vec(),
            start,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }
}

impl Objective for Classification {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        model: &ModelGraph,
        bound: &BoundParams,
        batch: &[usize],
    ) -> Result<Var> {
        let x = tape.constant(self.inputs.select(batch));
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let logits = model.forward_on_tape(tape, bound, x, self.start..model.layers().len())?;
        tape.softmax_cross_entropy(logits, &labels)
    }
}

/// Stopping rules for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Fail unless the full-data loss after training is below the loss
    /// before it.
    pub require_decrease: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            patience: 3,
            require_decrease: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct TrainLog {
    /// Full-data loss before the first update.
    pub initial_loss: f64,
    /// Full-data loss after training (NaN when not measured).
    pub final_loss: f64,
    /// Mean batch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation score per epoch, when a validator was supplied.
    pub validation: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        if self.final_loss.is_nan() {
            self.epoch_losses
                .last()
                .copied()
                .unwrap_or(self.initial_loss)
        } else {
            self.final_loss
        }
    }
}

/// Higher-is-better score evaluated after each epoch.
pub type Validator<'a> = dyn FnMut(&ModelGraph) -> Result<f64> + 'a;

/// Trains `model` in place with momentum SGD. Batches come from a seeded
/// per-epoch shuffle. With a validator the best-scoring epoch's weights are
/// kept and training stops once the score plateaus for `patience` epochs.
pub fn fit(
    model: &mut ModelGraph,
    objective: &mut dyn Objective,
    config: &SgdConfig,
    options: FitOptions,
    stage: &str,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<TrainLog> {
    config.validate()?;
    let n = objective.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{stage}: no training samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = MomentumSgd::new(config);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        ..TrainLog::default()
    };
    if options.require_decrease {
        objective.begin_epoch(model, 0)?;
        log.initial_loss = full_loss(model, objective, config.batch_size)?;
    }
    let mut best: Option<(f64, ModelGraph)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        objective.begin_epoch(model, epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = objective.batch_loss(&mut tape, model, &bound, batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonConvergence {
                    stage: stage.to_string(),
                    detail: format!("loss became {value} in epoch {epoch}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            let param_grads = bound.param_grads(&mut grads);
            opt.step(model, &param_grads)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log.epoch_losses.push(mean);
        log::debug!("{stage}: epoch {epoch} loss {mean:.6}");
        if let Some(v) = validator.as_deref_mut() {
            let score = v(model)?;
            log.validation.push(score);
            match &best {
                Some((b, _)) if score <= *b => {
                    since_best += 1;
                    if since_best >= options.patience {
                        log.stopped_early = epoch + 1 < config.epochs;
                        break;
                    }
                }
                _ => {
                    best = Some((score, model.clone()));
                    since_best = 0;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    if options.require_decrease {
        objective.begin_epoch(model, config.epochs)?;
        log.final_loss = full_loss(model, objective, config.batch_size)?;
        let last = log.final_loss;
        if last.partial_cmp(&log.initial_loss) != Some(std::cmp::Ordering::Less) {
            return Err(Error::NonConvergence {
                stage: stage.to_string(),
                detail: format!(
                    "loss {last:.6} did not improve on initial {:.6}",
                    log.initial_loss
                ),
            });
        }
    }
    Ok(log)
}

/// Sample-weighted mean of batch losses over the whole objective, in order.
pub fn full_loss(model: &ModelGraph, objective: &dyn Objective, batch_size: usize) -> Result<f64> {
    let n = objective.len();
    let order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for batch in order.chunks(batch_size.max(1) * 4) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = objective.batch_loss(&mut tape, model, &bound, batch)?;
        total += tape.value(loss).item() * batch.len() as f64;
    }
    Ok(total / n as f64)
}

/// Top-1 accuracy of `model` on `data`.
pub fn accuracy(model: &ModelGraph, data: &LabeledDataset) -> Result<f64> {
    let classes = model.class_count();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy on empty dataset".into()));
    }
    let pred = model.predict(data.images())?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains a model on labeled data with plain cross-entropy.
pub fn train_classifier(
    model: &mut ModelGraph,
    data: &LabeledDataset,
    config: &SgdConfig,
    stage: &str,
) -> Result<TrainLog> {
    let mut objective = Classification::with_frozen_prefix(model, data)?;
    fit(
        model,
        &mut objective,
        config,
        FitOptions::default(),
        stage,
        None,
    )
}
