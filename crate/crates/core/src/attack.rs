//! Teacher-side latent backdoor: retrain with the target, optimize a trigger
//! in feature space, inject it, then restore the original head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mse, Tape, Var};
use crate::data::{LabeledDataset, TargetData};
use crate::error::{Error, Result};
use crate::model::{BoundParams, HeadSnapshot, ModelGraph};
use crate::optim::SgdConfig;
use crate::tensor::Tensor;
use crate::train::{accuracy, fit, FitOptions, Objective, TrainLog};
use crate::trigger::{random_pattern, TriggerSpec};

/// Representative feature `φ` of a target class at layer `K_t`: the mean of
/// the target samples' features, which minimizes the summed MSE to them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTarget {
    phi: Tensor,
    layer: usize,
}

impl FeatureTarget {
    pub fn compute(model: &ModelGraph, layer: usize, x_target: &Tensor) -> Result<Self> {
        if x_target.batch() == 0 {
            return Err(Error::InvalidArgument("no target samples".into()));
        }
        let feats = model.feature_at(layer, x_target)?;
        Ok(FeatureTarget {
            phi: feats.mean_over_batch(),
            layer,
        })
    }

    /// `φ` with a leading batch dimension of 1.
    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Mean over samples of `MSE(F^{K_t}(x_i), φ)`.
    pub fn mean_gap(&self, model: &ModelGraph, x: &Tensor) -> Result<f64> {
        let feats = model.feature_at(self.layer, x)?;
        Ok(per_sample_gaps(&feats, &self.phi).iter().sum::<f64>() / feats.batch() as f64)
    }
}

/// `MSE(f_i, φ)` for every row `f_i` of `feats`.
pub fn per_sample_gaps(feats: &Tensor, phi: &Tensor) -> Vec<f64> {
    let d = phi.numel();
    (0..feats.batch())
        .map(|i| {
            feats
                .sample(i)
                .iter()
                .zip(phi.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d as f64
        })
        .collect()
}

/// Hyperparameters of the teacher-side attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Weight of the feature term.
    pub lambda: f64,
    /// Retraining with the target class added.
    pub retrain: SgdConfig,
    /// Injection training.
    pub inject: SgdConfig,
    pub trigger_steps: usize,
    pub trigger_rate: f64,
    pub trigger_batch: usize,
    /// Required relative decrease of the trigger objective.
    pub trigger_min_decrease: f64,
    /// Recompute `φ` every this many injection epochs.
    pub phi_refresh_epochs: usize,
    /// Allowed final poisoned gap as a fraction of the clean-to-`φ` gap.
    pub gap_fraction: f64,
    pub enforce_gap: bool,
    /// Repeat target samples until each target is about as frequent as an
    /// average non-target class.
    pub balance_targets: bool,
    /// Cap on attacker non-target samples per class (0 keeps all).
    pub nontarget_per_class: usize,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            lambda: 3.0,
            retrain: SgdConfig {
                epochs: 3,
                ..SgdConfig::default()
            },
            inject: SgdConfig::default(),
            trigger_steps: 500,
            trigger_rate: 0.1,
            trigger_batch: 32,
            trigger_min_decrease: 0.0,
            phi_refresh_epochs: 1,
            gap_fraction: 0.1,
            enforce_gap: true,
            balance_targets: true,
            nontarget_per_class: 0,
            seed: 0,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be positive",
                self.lambda
            )));
        }
        if self.trigger_rate.is_nan() || self.trigger_rate <= 0.0 || self.trigger_batch == 0 {
            return Err(Error::Config(
                "trigger rate and batch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.trigger_min_decrease) {
            return Err(Error::Config(
                "trigger_min_decrease must lie in [0, 1]".into(),
            ));
        }
        if self.phi_refresh_epochs == 0 {
            return Err(Error::Config("phi_refresh_epochs must be positive".into()));
        }
        self.retrain.validate()?;
        self.inject.validate()
    }
}

/// Training data for the widened teacher: non-target samples keep their
/// labels, target `i` gets label `C + i`.
#[derive(Debug, Clone)]
pub struct AttackData {
    pub samples: LabeledDataset,
    pub nontarget: LabeledDataset,
    pub teacher_classes: usize,
}

impl AttackData {
    pub fn build(
        targets: &[TargetData],
        nontarget: &LabeledDataset,
        config: &InjectionConfig,
    ) -> Result<Self> {
        if targets.is_empty() || nontarget.is_empty() {
            return Err(Error::InvalidArgument(
                "attack needs target and non-target samples".into(),
            ));
        }
        let nontarget = if config.nontarget_per_class > 0 {
            nontarget.sample_per_class(config.nontarget_per_class, config.seed ^ 0x6e74)
        } else {
            nontarget.clone()
        };
        let c = nontarget.classes();
        let classes = c + targets.len();
        let per_class = nontarget.len() / c.max(1);
        let mut parts = vec![relabel_space(&nontarget, classes)?];
        for (i, t) in targets.iter().enumerate() {
            if t.samples.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "target {} has no samples",
                    t.source_label
                )));
            }
            let relabeled = t.samples.with_label(c + i, classes)?;
            let reps = if config.balance_targets {
                (per_class / relabeled.len()).max(1)
            } else {
                1
            };
            for _ in 0..reps {
                parts.push(relabeled.clone());
            }
        }
        let refs: Vec<&LabeledDataset> = parts.iter().collect();
        Ok(AttackData {
            samples: LabeledDataset::concat(&refs, classes)?,
            nontarget,
            teacher_classes: c,
        })
    }
}

fn relabel_space(data: &LabeledDataset, classes: usize) -> Result<LabeledDataset> {
    LabeledDataset::with_ids(
        data.images().clone(),
        data.labels().to_vec(),
        data.ids().to_vec(),
        classes,
    )
}

/// Step 1: widen the head to cover the targets and retrain every layer.
/// Returns the retrained model and the original head.
pub fn retrain_with_target(
    teacher: &ModelGraph,
    data: &AttackData,
    config: &SgdConfig,
    head_seed: u64,
) -> Result<(ModelGraph, HeadSnapshot, TrainLog)> {
    let snapshot = teacher.head_snapshot()?;
    let mut model = teacher.replace_classification_layer(data.samples.classes(), head_seed)?;
    model.freeze_through(0);
    let mut objective = crate::train::Classification::new(&data.samples);
    let log = fit(
        &mut model,
        &mut objective,
        config,
        FitOptions::default(),
        "retrain",
        None,
    )?;
    Ok((model, snapshot, log))
}

/// Outcome of trigger optimization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerReport {
    /// Mean pairwise MSE between poisoned and target features, before.
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Part of the objective no trigger can remove (target spread).
    pub spread: f64,
}

impl TriggerReport {
    pub fn relative_decrease(&self) -> f64 {
        1.0 - self.final_objective / self.initial_objective
    }
}

/// Mean over `x` and `x_t` of `MSE(F^{K_t}(A(x)), F^{K_t}(x_t))`, by direct
/// double loop over the features.
pub fn pairwise_objective(poisoned: &Tensor, target: &Tensor) -> f64 {
    let d = target.sample_len();
    let mut total = 0.0;
    for i in 0..poisoned.batch() {
        for j in 0..target.batch() {
            total += poisoned
                .sample(i)
                .iter()
                .zip(target.sample(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d as f64;
        }
    }
    total / (poisoned.batch() * target.batch()) as f64
}

/// The pairwise objective through the mean identity:
/// `mean_j MSE(f, f_j) = MSE(f, φ) + mean_j MSE(f_j, φ)`.
fn objective_via_mean(poisoned: &Tensor, phi: &FeatureTarget, spread: f64) -> f64 {
    let gaps = per_sample_gaps(poisoned, phi.phi());
    gaps.iter().sum::<f64>() / gaps.len() as f64 + spread
}

/// Step 2: search the pattern `Δ` inside `mask` that pulls poisoned features
/// of `x_pool` toward the target features at layer `layer`. The model is
/// not modified. `Δ` starts uniform in `[0, 1]` and is clamped every step.
pub fn generate_trigger(
    model: &ModelGraph,
    mask: &Tensor,
    layer: usize,
    x_target: &Tensor,
    x_pool: &Tensor,
    config: &InjectionConfig,
) -> Result<(TriggerSpec, TriggerReport)> {
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyMask);
    }
    let start = TriggerSpec::new(
        mask.clone(),
        random_pattern(mask.shape(), config.seed ^ 0x7472),
        layer,
    )?;
    let phi = FeatureTarget::compute(model, layer, x_target)?;
    let target_feats = model.feature_at(layer, x_target)?;
    let spread = per_sample_gaps(&target_feats, phi.phi())
        .iter()
        .sum::<f64>()
        / target_feats.batch() as f64;
    let all = crate::tensor::Tensor::concat(&[x_pool, x_target])?;
    let measure = |t: &TriggerSpec| -> Result<f64> {
        let f = model.feature_at(layer, &t.apply(&all)?)?;
        Ok(objective_via_mean(&f, &phi, spread))
    };
    let initial = measure(&start)?;

    let end = model.end_position(layer)?;
    let keep: Tensor = mask.map(|m| 1.0 - m).reshape(&batched(mask.shape()))?;
    let mut pattern = start.pattern().clone();
    let mut adam = Adam::new(pattern.numel(), config.trigger_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f70);
    let mut order: Vec<usize> = (0..all.batch()).collect();
    let mut cursor = order.len();
    let target_rows = phi.phi().tile_batch(config.trigger_batch.min(all.batch()));
    for _ in 0..config.trigger_steps {
        if cursor + config.trigger_batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + config.trigger_batch).min(order.len())];
        cursor += batch.len();
        let xb = all.select(batch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let kept = xb.zip_map(&keep.tile_batch(xb.batch()), |x, k| x * k)?;
        let kept = tape.constant(kept);
        let m = tape.constant(mask.clone().reshape(&batched(mask.shape()))?);
        let delta = tape.variable(pattern.clone().reshape(&batched(mask.shape()))?);
        let stamped = tape.mul(m, delta)?;
        let poisoned = tape.add(kept, stamped)?;
        let feats = model.forward_on_tape(&mut tape, &bound, poisoned, 0..end)?;
        let goal = tape.constant(target_rows.select(&(0..batch.len()).collect::<Vec<_>>()));
        let loss = tape.mse(feats, goal)?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(delta).ok_or(Error::MissingGradient {
            layer: 0,
            slot: "trigger",
        })?;
        adam.step(pattern.data_mut(), g.data());
        for v in pattern.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let trigger = start.with_pattern(pattern)?;
    let final_objective = measure(&trigger)?;
    let report = TriggerReport {
        initial_objective: initial,
        final_objective,
        spread,
    };
    if !(final_objective < initial && report.relative_decrease() >= config.trigger_min_decrease) {
        return Err(Error::ObjectiveNotDecreasing {
            initial,
            final_value: final_objective,
        });
    }
    Ok((trigger, report))
}

fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Adam update on a flat parameter vector.
#[derive(Debug, Clone)]
struct Adam {
    rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, rate: f64) -> Self {
        Adam {
            rate,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            w[i] -= self.rate * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Joint loss `CE(F(x), y) + λ Σ_i MSE(F^{K_t}(A_i(x)), φ_i)`, with each
/// `φ_i` recomputed from the current weights at epoch boundaries.
struct InjectionObjective<'a> {
    data: &'a LabeledDataset,
    triggers: &'a [TriggerSpec],
    target_images: Vec<Tensor>,
    phis: Vec<FeatureTarget>,
    layer: usize,
    lambda: f64,
    refresh: usize,
}

impl Objective for InjectionObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn begin_epoch(&mut self, model: &ModelGraph, epoch: usize) -> Result<()> {
        if self.phis.is_empty() || epoch.is_multiple_of(self.refresh) {
            self.phis = self
                .target_images
                .iter()
                .map(|x| FeatureTarget::compute(model, self.layer, x))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        model: &ModelGraph,
        bound: &BoundParams,
        batch: &[usize],
    ) -> Result<Var> {
        let images = self.data.images().select(batch);
        let labels: Vec<usize> = batch.iter().map(|&i| self.data.labels()[i]).collect();
        let x = tape.constant(images.clone());
        let logits = model.forward_on_tape(tape, bound, x, 0..model.layers().len())?;
        let mut loss = tape.softmax_cross_entropy(logits, &labels)?;
        let end = model.end_position(self.layer)?;
        let weight = tape.constant(Tensor::scalar(self.lambda));
        for (trigger, phi) in self.triggers.iter().zip(&self.phis) {
            let xp = tape.constant(trigger.apply(&images)?);
            let feats = model.forward_on_tape(tape, bound, xp, 0..end)?;
            let goal = tape.constant(phi.phi().tile_batch(batch.len()));
            let gap = tape.mse(feats, goal)?;
            let term = tape.mul(gap, weight)?;
            loss = tape.add(loss, term)?;
        }
        Ok(loss)
    }
}

/// Measurements taken after injection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectionReport {
    pub log: TrainLog,
    /// Per target: mean `MSE(F^{K_t}(A(x)), φ)` over held-in non-target `x`.
    pub poisoned_gap: Vec<f64>,
    /// Per target: mean `MSE(F^{K_t}(x), φ)` on the same clean `x`.
    pub clean_gap: Vec<f64>,
    /// Per target: the clean gap measured on the model before injection.
    pub baseline_gap: Vec<f64>,
    /// Per target: share of samples whose poisoned feature is closer to `φ`
    /// than their clean feature.
    pub closer_fraction: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

impl InjectionReport {
    pub fn gap_threshold(&self, fraction: f64) -> Vec<f64> {
        self.baseline_gap.iter().map(|g| g * fraction).collect()
    }
}

/// Step 3 for any number of targets. `data.samples` must use the widened
/// label space with target `i` at label `C + i`.
pub fn inject_multi_target(
    model: &ModelGraph,
    triggers: &[TriggerSpec],
    target_images: &[Tensor],
    data: &AttackData,
    config: &InjectionConfig,
) -> Result<(ModelGraph, Vec<FeatureTarget>, InjectionReport)> {
    config.validate()?;
    if triggers.is_empty() || triggers.len() != target_images.len() {
        return Err(Error::InvalidArgument(
            "one trigger per target sample set is required".into(),
        ));
    }
    let layer = triggers[0].inject_layer();
    if triggers.iter().any(|t| t.inject_layer() != layer) {
        return Err(Error::InvalidArgument(
            "all triggers must share the injection layer".into(),
        ));
    }
    let accuracy_before = accuracy(model, &data.samples)?;
    let held_in = data.nontarget.images();
    let baseline_gap = target_images
        .iter()
        .map(|x| FeatureTarget::compute(model, layer, x)?.mean_gap(model, held_in))
        .collect::<Result<Vec<_>>>()?;
    let mut infected = model.clone();
    infected.freeze_through(0);
    let mut objective = InjectionObjective {
        data: &data.samples,
        triggers,
        target_images: target_images.to_vec(),
        phis: Vec::new(),
        layer,
        lambda: config.lambda,
        refresh: config.phi_refresh_epochs,
    };
    let log = fit(
        &mut infected,
        &mut objective,
        &config.inject,
        FitOptions::default(),
        "inject",
        None,
    )?;
    let phis: Vec<FeatureTarget> = target_images
        .iter()
        .map(|x| FeatureTarget::compute(&infected, layer, x))
        .collect::<Result<_>>()?;
    let clean_feats = infected.feature_at(layer, held_in)?;
    let mut report = InjectionReport {
        log,
        poisoned_gap: Vec::new(),
        clean_gap: Vec::new(),
        baseline_gap,
        closer_fraction: Vec::new(),
        accuracy_before,
        accuracy_after: accuracy(&infected, &data.samples)?,
    };
    for (trigger, phi) in triggers.iter().zip(&phis) {
        let poisoned = infected.feature_at(layer, &trigger.apply(held_in)?)?;
        let pg = per_sample_gaps(&poisoned, phi.phi());
        let cg = per_sample_gaps(&clean_feats, phi.phi());
        let n = pg.len() as f64;
        report.poisoned_gap.push(pg.iter().sum::<f64>() / n);
        report.clean_gap.push(cg.iter().sum::<f64>() / n);
        report
            .closer_fraction
            .push(pg.iter().zip(&cg).filter(|(p, c)| p < c).count() as f64 / n);
    }
    if config.enforce_gap {
        for (gap, threshold) in report
            .poisoned_gap
            .iter()
            .zip(report.gap_threshold(config.gap_fraction))
        {
            if *gap > threshold {
                return Err(Error::FeatureGapTooLarge {
                    gap: *gap,
                    threshold,
                });
            }
        }
    }
    Ok((infected, phis, report))
}

/// Step 3 for a single target.
pub fn inject_backdoor(
    model: &ModelGraph,
    trigger: &TriggerSpec,
    x_target: &Tensor,
    data: &AttackData,
    config: &InjectionConfig,
) -> Result<(ModelGraph, FeatureTarget, InjectionReport)> {
    let (m, mut phis, r) = inject_multi_target(
        model,
        std::slice::from_ref(trigger),
        std::slice::from_ref(x_target),
        data,
        config,
    )?;
    Ok((m, phis.remove(0), r))
}

/// Step 4: put the original classification head back.
pub fn wipe_target_trace(infected: &ModelGraph, original: &HeadSnapshot) -> Result<ModelGraph> {
    infected.restore_head(original)
}

/// How trigger patterns are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerMode {
    Optimized,
    /// Uniform random pattern with the given seed, no optimization.
    Random(u64),
}

/// Everything the teacher-side attack produced.
#[derive(Debug, Clone)]
pub struct Infection {
    /// Infected teacher with the original head restored.
    pub teacher: ModelGraph,
    pub triggers: Vec<TriggerSpec>,
    pub trigger_reports: Vec<Option<TriggerReport>>,
    pub feature_targets: Vec<FeatureTarget>,
    pub retrain_log: TrainLog,
    pub injection: InjectionReport,
}

/// Step 1 done once, shared by any number of trigger/injection runs.
#[derive(Debug, Clone)]
pub struct PreparedAttack {
    pub data: AttackData,
    pub retrained: ModelGraph,
    pub snapshot: HeadSnapshot,
    pub retrain_log: TrainLog,
}

impl PreparedAttack {
    pub fn new(
        teacher: &ModelGraph,
        targets: &[TargetData],
        nontarget: &LabeledDataset,
        config: &InjectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let data = AttackData::build(targets, nontarget, config).map_err(|e| e.in_stage("data"))?;
        let (retrained, snapshot, retrain_log) =
            retrain_with_target(teacher, &data, &config.retrain, config.seed ^ 0x6865)
                .map_err(|e| e.in_stage("retrain"))?;
        Ok(PreparedAttack {
            data,
            retrained,
            snapshot,
            retrain_log,
        })
    }

    /// Steps 2–4. `target_images[i]` must be the samples of target `i` used
    /// to build the attack data.
    pub fn infect(
        &self,
        target_images: &[Tensor],
        mask: &Tensor,
        layer: usize,
        mode: TriggerMode,
        config: &InjectionConfig,
    ) -> Result<Infection> {
        config.validate()?;
        if layer == 0 || layer >= self.retrained.depth() {
            return Err(Error::IndexOutOfRange {
                index: layer,
                max: self.retrained.depth() - 1,
            });
        }
        let mut triggers = Vec::new();
        let mut reports = Vec::new();
        for (i, x_t) in target_images.iter().enumerate() {
            let (trigger, report) = match mode {
                TriggerMode::Optimized => {
                    let cfg = InjectionConfig {
                        seed: config.seed.wrapping_add(i as u64),
                        ..config.clone()
                    };
                    let (t, r) = generate_trigger(
                        &self.retrained,
                        mask,
                        layer,
                        x_t,
                        self.data.nontarget.images(),
                        &cfg,
                    )
                    .map_err(|e| e.in_stage("trigger"))?;
                    (t, Some(r))
                }
                TriggerMode::Random(seed) => {
                    let pattern = random_pattern(mask.shape(), seed.wrapping_add(i as u64));
                    (TriggerSpec::new(mask.clone(), pattern, layer)?, None)
                }
            };
            triggers.push(trigger);
            reports.push(report);
        }
        let (infected, feature_targets, injection) = inject_multi_target(
            &self.retrained,
            &triggers,
            target_images,
            &self.data,
            config,
        )
        .map_err(|e| e.in_stage("inject"))?;
        let teacher =
            wipe_target_trace(&infected, &self.snapshot).map_err(|e| e.in_stage("wipe"))?;
        Ok(Infection {
            teacher,
            triggers,
            trigger_reports: reports,
            feature_targets,
            retrain_log: self.retrain_log.clone(),
            injection,
        })
    }
}

/// Steps 1–4 with one trigger per target, all bound at layer `layer`.
pub fn infect(
    teacher: &ModelGraph,
    targets: &[TargetData],
    nontarget: &LabeledDataset,
    mask: &Tensor,
    layer: usize,
    mode: TriggerMode,
    config: &InjectionConfig,
) -> Result<Infection> {
    if layer == 0 || layer >= teacher.depth() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            max: teacher.depth() - 1,
        });
    }
    let prepared = PreparedAttack::new(teacher, targets, nontarget, config)?;
    let images: Vec<Tensor> = targets.iter().map(|t| t.samples.images().clone()).collect();
    prepared.infect(&images, mask, layer, mode, config)
}

/// Mean MSE between the poisoned features of `x` and `φ`, for reports.
pub fn poisoned_gap(
    model: &ModelGraph,
    trigger: &TriggerSpec,
    phi: &FeatureTarget,
    x: &Tensor,
) -> Result<f64> {
    let f = model.feature_at(phi.layer(), &trigger.apply(x)?)?;
    mse(&f, &phi.phi().tile_batch(f.batch()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::ModelBuilder;
    use crate::trigger::default_mask;

    fn tiny() -> ModelGraph {
        ModelBuilder::new(1, 10, 10)
            .conv(4, 3, 1)
            .pool(2, 2)
            .fc(12)
            .softmax_head(3)
            .build(1)
    }

    #[test]
    fn phi_is_feature_mean() {
        let m = tiny();
        let x = make_synthetic(3, 4, 10, 2).unwrap();
        let phi = FeatureTarget::compute(&m, 2, x.images()).unwrap();
        let f = m.feature_at(2, x.images()).unwrap();
        let d = f.sample_len();
        for j in 0..d {
            let mean = (0..f.batch()).map(|i| f.sample(i)[j]).sum::<f64>() / f.batch() as f64;
            assert!((phi.phi().data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_identity_matches_pairwise_loop() {
        let m = tiny();
        let pool = make_synthetic(3, 5, 10, 3).unwrap();
        let tgt = make_synthetic(2, 3, 10, 4).unwrap();
        let t =
            TriggerSpec::new(default_mask(1, 10, 10), random_pattern(&[1, 10, 10], 1), 1).unwrap();
        let poisoned = m.feature_at(1, &t.apply(pool.images()).unwrap()).unwrap();
        let target = m.feature_at(1, tgt.images()).unwrap();
        let phi = FeatureTarget::compute(&m, 1, tgt.images()).unwrap();
        let spread = per_sample_gaps(&target, phi.phi()).iter().sum::<f64>() / 6.0;
        let direct = pairwise_objective(&poisoned, &target);
        let via = objective_via_mean(&poisoned, &phi, spread);
        assert!((direct - via).abs() < 1e-8, "{direct} vs {via}");
    }

    #[test]
    fn single_target_collapses_inner_sum() {
        let m = tiny();
        let pool = make_synthetic(3, 4, 10, 3).unwrap();
        let tgt = make_synthetic(1, 1, 10, 4).unwrap();
        let target = m.feature_at(2, tgt.images()).unwrap();
        let poisoned = m.feature_at(2, pool.images()).unwrap();
        let direct = pairwise_objective(&poisoned, &target);
        let per: f64 = per_sample_gaps(&poisoned, &target).iter().sum::<f64>() / 12.0;
        assert!((direct - per).abs() < 1e-12);
    }

    #[test]
    fn trigger_search_leaves_model_untouched_and_decreases() {
        let m = tiny();
        let pool = make_synthetic(3, 6, 10, 5).unwrap();
        let tgt = make_synthetic(3, 3, 10, 6).unwrap().subset(&[0, 1, 2]);
        let before = crate::container::model_to_bytes(&m);
        let cfg = InjectionConfig {
            trigger_steps: 60,
            trigger_batch: 8,
            trigger_min_decrease: 0.0,
            ..InjectionConfig::default()
        };
        let (t, r) = generate_trigger(
            &m,
            &default_mask(1, 10, 10),
            2,
            tgt.images(),
            pool.images(),
            &cfg,
        )
        .unwrap();
        assert_eq!(crate::container::model_to_bytes(&m), before);
        assert!(r.final_objective < r.initial_objective);
        assert!(t.pattern().min() >= 0.0 && t.pattern().max() <= 1.0);
        assert_eq!(t.inject_layer(), 2);
    }

    #[test]
    fn empty_mask_rejected() {
        let m = tiny();
        let x = make_synthetic(3, 2, 10, 5).unwrap();
        let err = generate_trigger(
            &m,
            &Tensor::zeros(&[1, 10, 10]),
            1,
            x.images(),
            x.images(),
            &InjectionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn wipe_touches_only_head() {
        let m = tiny();
        let snap = m.head_snapshot().unwrap();
        let mut wide = m.replace_classification_layer(4, 3).unwrap();
        let pos = wide.param_position(1).unwrap();
        wide.layer_params_mut(pos).unwrap().weight.data_mut()[0] += 1.0;
        let wiped = wipe_target_trace(&wide, &snap).unwrap();
        assert_eq!(wiped.class_count(), 3);
        assert_eq!(wiped.differing_indices(&wide), vec![3]);
        assert_eq!(wiped.differing_indices(&m), vec![1]);
    }
}
