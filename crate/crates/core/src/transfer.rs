//! Student-side transfer learning: copy the teacher, attach a fresh head,
//! freeze the first K layers and fine-tune the rest.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::optim::SgdConfig;
use crate::tensor::Tensor;
use crate::train::{accuracy, fit, Classification, FitOptions, TrainLog};
use crate::trigger::TriggerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// K: number of leading indexed layers kept frozen.
    pub frozen_layers: usize,
    pub student_classes: usize,
    pub sgd: SgdConfig,
    /// Seed of the new head, independent of the teacher's.
    pub head_seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the student data held out for early stopping (0 disables).
    pub validation_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            frozen_layers: 3,
            student_classes: 5,
            sgd: SgdConfig::default(),
            head_seed: 0x5eed,
            patience: 3,
            validation_fraction: 0.1,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        self.sgd.validate()
    }
}

/// Copies layers `1..N−1`, adds a seeded head and freezes layers `1..=K`.
pub fn build_student(teacher: &ModelGraph, config: &TransferConfig) -> Result<ModelGraph> {
    let max = teacher.depth().saturating_sub(1);
    if config.frozen_layers > max {
        return Err(Error::InvalidFrozenCount {
            k: config.frozen_layers,
            max,
        });
    }
    if config.student_classes < 2 {
        return Err(Error::InvalidArgument(
            "a student needs at least two classes".into(),
        ));
    }
    let mut student =
        teacher.replace_classification_layer(config.student_classes, config.head_seed)?;
    student.freeze_through(config.frozen_layers);
    Ok(student)
}

/// Fine-tunes the unfrozen layers on `data`. A seeded slice of `data` is
/// held out and the best epoch by held-out accuracy is kept.
pub fn fine_tune(
    student: &ModelGraph,
    data: &LabeledDataset,
    config: &TransferConfig,
) -> Result<(ModelGraph, TrainLog)> {
    fine_tune_with(student, data, config, true)
}

/// [`fine_tune`] with control over the loss-decrease check, which is
/// skipped when continuing from an already tuned model.
pub fn fine_tune_with(
    student: &ModelGraph,
    data: &LabeledDataset,
    config: &TransferConfig,
    require_decrease: bool,
) -> Result<(ModelGraph, TrainLog)> {
    config.validate()?;
    let (train, held_out) = holdout(data, config.validation_fraction, config.sgd.seed);
    let mut model = student.clone();
    let mut objective = Classification::with_frozen_prefix(&model, &train)?;
    let options = FitOptions {
        patience: config.patience,
        require_decrease,
    };
    let log = match held_out {
        Some(v) => {
            let mut validator = |m: &ModelGraph| accuracy(m, &v);
            fit(
                &mut model,
                &mut objective,
                &config.sgd,
                options,
                "fine-tune",
                Some(&mut validator),
            )?
        }
        None => fit(
            &mut model,
            &mut objective,
            &config.sgd,
            options,
            "fine-tune",
            None,
        )?,
    };
    Ok((model, log))
}

/// Seeded split into (train, held-out).
fn holdout(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> (LabeledDataset, Option<LabeledDataset>) {
    let n_out = (data.len() as f64 * fraction).round() as usize;
    if n_out == 0 || n_out >= data.len() {
        return (data.clone(), None);
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x686f);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let mut out = idx[..n_out].to_vec();
    let mut keep = idx[n_out..].to_vec();
    out.sort_unstable();
    keep.sort_unstable();
    (data.subset(&keep), Some(data.subset(&out)))
}

/// Structural check that a latent backdoor carries over to a student.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub frozen_layers: usize,
    pub inject_layer: usize,
    /// K ≥ K_t.
    pub hypothesis_holds: bool,
    /// Layers `1..=K_t` are byte-identical in teacher and student.
    pub prefix_identical: bool,
    /// Teacher and student produce bit-identical poisoned features at K_t.
    pub features_identical: bool,
    /// Mean poisoned-feature gap to `φ` in the teacher and the student.
    pub teacher_gap: f64,
    pub student_gap: f64,
    pub attack_success_rate: f64,
}

impl TransferReport {
    pub fn summary(&self) -> String {
        if self.hypothesis_holds {
            format!(
                "K={} >= K_t={}: prefix identical {}, features identical {}, success {:.3}",
                self.frozen_layers,
                self.inject_layer,
                self.prefix_identical,
                self.features_identical,
                self.attack_success_rate
            )
        } else {
            format!(
                "K={} < K_t={}: hypothesis violated, layers before K_t were retrained; \
                 success {:.3} (collapse expected)",
                self.frozen_layers, self.inject_layer, self.attack_success_rate
            )
        }
    }
}

/// Checks that the frozen prefix up to `K_t` matches the teacher, that the
/// poisoned features and their gap to the target mean carry over, and
/// measures the attack success rate.
pub fn verify_transfer(
    teacher: &ModelGraph,
    student: &ModelGraph,
    trigger: &TriggerSpec,
    x_eval: &Tensor,
    x_target: &Tensor,
    target_label: usize,
) -> Result<TransferReport> {
    let kt = trigger.inject_layer();
    let k = student.frozen_count();
    let poisoned = trigger.apply(x_eval)?;
    let tf = teacher.feature_at(kt, &poisoned)?;
    let sf = student.feature_at(kt, &poisoned)?;
    let tphi = crate::attack::FeatureTarget::compute(teacher, kt, x_target)?;
    let sphi = crate::attack::FeatureTarget::compute(student, kt, x_target)?;
    let teacher_gap = crate::autodiff::mse(&tf, &tphi.phi().tile_batch(tf.batch()))?;
    let student_gap = crate::autodiff::mse(&sf, &sphi.phi().tile_batch(sf.batch()))?;
    Ok(TransferReport {
        frozen_layers: k,
        inject_layer: kt,
        hypothesis_holds: k >= kt,
        prefix_identical: teacher.prefix_identical(student, kt),
        features_identical: tf.bit_eq(&sf),
        teacher_gap,
        student_gap,
        attack_success_rate: crate::metrics::attack_success_rate(
            student,
            trigger,
            x_eval,
            target_label,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::{build_digit_teacher, ModelBuilder};

    #[test]
    fn student_differs_only_in_head() {
        let t = build_digit_teacher(1);
        let s = build_student(&t, &TransferConfig::default()).unwrap();
        assert_eq!(t.differing_indices(&s), vec![4]);
        assert_eq!(s.frozen_count(), 3);
        let layers = s.layers();
        assert!(!layers.last().unwrap().frozen);
    }

    #[test]
    fn frozen_count_bounds() {
        let t = build_digit_teacher(1);
        for k in [0, 3] {
            let cfg = TransferConfig {
                frozen_layers: k,
                ..TransferConfig::default()
            };
            assert_eq!(build_student(&t, &cfg).unwrap().frozen_count(), k);
        }
        let cfg = TransferConfig {
            frozen_layers: 4,
            ..TransferConfig::default()
        };
        assert!(matches!(
            build_student(&t, &cfg),
            Err(Error::InvalidFrozenCount { k: 4, max: 3 })
        ));
    }

    #[test]
    fn build_is_deterministic_and_head_seed_independent() {
        let t = build_digit_teacher(1);
        let cfg = TransferConfig::default();
        assert_eq!(
            build_student(&t, &cfg).unwrap(),
            build_student(&t, &cfg).unwrap()
        );
        let other = TransferConfig {
            head_seed: 1,
            ..cfg.clone()
        };
        assert_ne!(
            build_student(&t, &cfg).unwrap(),
            build_student(&t, &other).unwrap()
        );
    }

    #[test]
    fn fine_tune_keeps_frozen_bytes() {
        let t = ModelBuilder::new(1, 8, 8)
            .conv(4, 3, 1)
            .pool(2, 2)
            .fc(16)
            .softmax_head(3)
            .build(4);
        let data = make_synthetic(2, 30, 8, 9).unwrap();
        let cfg = TransferConfig {
            frozen_layers: 1,
            student_classes: 2,
            sgd: SgdConfig {
                epochs: 5,
                batch_size: 8,
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            ..TransferConfig::default()
        };
        let s = build_student(&t, &cfg).unwrap();
        let (tuned, _) = fine_tune(&s, &data, &cfg).unwrap();
        assert!(tuned.prefix_identical(&t, 1));
        assert!(!tuned.prefix_identical(&t, 2));
        assert!(accuracy(&tuned, &data).unwrap() > 0.9);
    }
}
