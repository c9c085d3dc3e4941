//! Experiment pipeline shared by the CLI stages and reproduction bundles.

use std::path::Path;

use crate::attack::{Infection, InjectionReport, PreparedAttack, TriggerMode, TriggerReport};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    load_mnist_dir, make_split, make_synthetic, DataSplit, LabeledDataset, SplitOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, clean_accuracy, MetricsRecord};
use crate::model::{build_digit_teacher, ModelGraph};
use crate::tensor::Tensor;
use crate::train::{train_classifier, TrainLog};
use crate::transfer::{build_student, fine_tune, TransferConfig};
use crate::trigger::{default_mask_side, square_mask, TriggerSpec};

/// Train and test pools, and whether they are the synthetic stand-in.
#[derive(Debug, Clone)]
pub struct Pools {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub synthetic: bool,
}

fn synthetic_pools(config: &ExperimentConfig) -> Result<Pools> {
    let per = config.data.synthetic_per_class;
    let seed = config.experiment.seed;
    Ok(Pools {
        train: make_synthetic(10, per, 28, seed ^ 0x7472)?,
        test: make_synthetic(10, per.div_ceil(4), 28, seed ^ 0x7465)?,
        synthetic: true,
    })
}

/// Loads the configured dataset. A missing MNIST directory is a data error.
pub fn load_pools(config: &ExperimentConfig) -> Result<Pools> {
    match config.data.source {
        DataSource::Synthetic => synthetic_pools(config),
        DataSource::Mnist => {
            let (mut train, test) = load_mnist_dir(config.data_root())?;
            if config.data.train_limit > 0 && config.data.train_limit < train.len() {
                let keep: Vec<usize> = (0..config.data.train_limit).collect();
                train = train.subset(&keep);
            }
            Ok(Pools {
                train,
                test,
                synthetic: false,
            })
        }
    }
}

/// [`load_pools`], falling back to synthetic data when MNIST is absent.
pub fn load_pools_or_synthetic(config: &ExperimentConfig) -> Result<Pools> {
    match load_pools(config) {
        Err(e)
            if config.data.source == DataSource::Mnist
                && e.family() == crate::ErrorFamily::Data =>
        {
            log::warn!("{e}; falling back to synthetic data");
            synthetic_pools(config)
        }
        other => other,
    }
}

/// Digit split for the given original target labels, |X_t| and seed.
pub fn split_for(
    config: &ExperimentConfig,
    pools: &Pools,
    targets: &[usize],
    target_count: usize,
    seed: u64,
) -> Result<DataSplit> {
    let opts = SplitOptions {
        targets: targets.to_vec(),
        eval_count: config.data.eval_count,
        ..SplitOptions::digit(targets[0], target_count, seed)
    };
    make_split(&pools.train, &pools.test, &opts)
}

pub fn default_split(config: &ExperimentConfig, pools: &Pools) -> Result<DataSplit> {
    split_for(
        config,
        pools,
        &[config.data.target_label],
        config.data.target_count,
        config.experiment.seed,
    )
}

/// The bottom-right square mask for the teacher input.
pub fn mask_for(config: &ExperimentConfig, input: &[usize]) -> Result<Tensor> {
    let (c, h, w) = (input[0], input[1], input[2]);
    let side = match config.trigger.mask_side {
        0 => default_mask_side(h, w),
        s => s,
    };
    if side > h.min(w) {
        return Err(Error::Config(format!(
            "mask side {side} exceeds image size"
        )));
    }
    Ok(square_mask(c, h, w, side))
}

pub fn train_teacher(
    config: &ExperimentConfig,
    split: &DataSplit,
) -> Result<(ModelGraph, TrainLog)> {
    let mut teacher = build_digit_teacher(config.experiment.seed);
    let log = train_classifier(
        &mut teacher,
        &split.nontarget,
        &config.teacher,
        "train-teacher",
    )?;
    Ok((teacher, log))
}

pub fn transfer(
    config: &TransferConfig,
    teacher: &ModelGraph,
    split: &DataSplit,
) -> Result<(ModelGraph, TrainLog)> {
    let student = build_student(teacher, config).map_err(|e| e.in_stage("transfer"))?;
    fine_tune(&student, &split.student, config).map_err(|e| e.in_stage("transfer"))
}

/// Metrics of a student for the first trigger and target of `split`.
pub fn evaluate(
    experiment: &str,
    seed: u64,
    student: &ModelGraph,
    trigger: &TriggerSpec,
    target: usize,
    split: &DataSplit,
) -> Result<MetricsRecord> {
    let record = MetricsRecord {
        experiment: experiment.to_string(),
        seed,
        attack_success_rate: attack_success_rate(student, trigger, split.eval.images(), target)?,
        clean_accuracy: clean_accuracy(student, &split.student_test)?,
        eval_samples: split.eval.len(),
        test_samples: split.student_test.len(),
    };
    record.validate()?;
    Ok(record)
}

/// One infected teacher and the student built from it.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub infection: Infection,
    pub student: ModelGraph,
    /// Per target: success rate of its own trigger toward its own label.
    pub success: Vec<f64>,
    pub clean_accuracy: f64,
}

impl AttackRun {
    pub fn mean_success(&self) -> f64 {
        self.success.iter().sum::<f64>() / self.success.len() as f64
    }
}

/// Clean teacher and the clean-teacher student for one dataset, shared by
/// every experiment that compares against them.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub config: ExperimentConfig,
    pub pools: Pools,
    pub split: DataSplit,
    pub teacher: ModelGraph,
    pub teacher_log: TrainLog,
    pub baseline_student: ModelGraph,
    pub baseline_accuracy: f64,
    pub mask: Tensor,
}

impl Workbench {
    pub fn prepare(config: &ExperimentConfig, pools: Pools) -> Result<Self> {
        let split = default_split(config, &pools)?;
        let (teacher, teacher_log) = train_teacher(config, &split)?;
        let (baseline_student, _) = transfer(&config.transfer, &teacher, &split)?;
        let baseline_accuracy = clean_accuracy(&baseline_student, &split.student_test)?;
        log::info!("clean-teacher student accuracy {baseline_accuracy:.4}");
        let mask = mask_for(config, teacher.input_shape())?;
        Ok(Workbench {
            config: config.clone(),
            pools,
            split,
            teacher,
            teacher_log,
            baseline_student,
            baseline_accuracy,
            mask,
        })
    }

    pub fn from_data_root(config: &ExperimentConfig) -> Result<Self> {
        Self::prepare(config, load_pools(config)?)
    }

    /// Accuracy of a clean-teacher student fine-tuned on `split`.
    pub fn baseline_accuracy_for(&self, split: &DataSplit) -> Result<f64> {
        let (student, _) = transfer(&self.config.transfer, &self.teacher, split)?;
        clean_accuracy(&student, &split.student_test)
    }

    /// Runs retraining for a split; reuse the result for several triggers.
    pub fn prepare_attack(&self, split: &DataSplit) -> Result<PreparedAttack> {
        PreparedAttack::new(
            &self.teacher,
            &split.targets,
            &split.nontarget,
            &self.config.attack,
        )
    }

    /// Injects, transfers and measures every target of `split`.
    pub fn run_prepared(
        &self,
        prepared: &PreparedAttack,
        split: &DataSplit,
        mode: TriggerMode,
    ) -> Result<AttackRun> {
        let images: Vec<Tensor> = split
            .targets
            .iter()
            .map(|t| t.samples.images().clone())
            .collect();
        let infection = prepared.infect(
            &images,
            &self.mask,
            self.config.trigger.inject_layer,
            mode,
            &self.config.attack,
        )?;
        let (student, _) = transfer(&self.config.transfer, &infection.teacher, split)?;
        let success = infection
            .triggers
            .iter()
            .zip(&split.targets)
            .map(|(t, d)| attack_success_rate(&student, t, split.eval.images(), d.student_label))
            .collect::<Result<Vec<_>>>()?;
        let clean_accuracy = clean_accuracy(&student, &split.student_test)?;
        Ok(AttackRun {
            infection,
            student,
            success,
            clean_accuracy,
        })
    }

    pub fn run_attack(&self, split: &DataSplit, mode: TriggerMode) -> Result<AttackRun> {
        let prepared = self.prepare_attack(split)?;
        self.run_prepared(&prepared, split, mode)
    }

    /// The default single-target attack with an optimized trigger.
    pub fn default_attack(&self) -> Result<AttackRun> {
        self.run_attack(&self.split, TriggerMode::Optimized)
    }

    /// Config copy with a different attack seed.
    pub fn reseeded(&self, seed: u64) -> Workbench {
        let mut w = self.clone();
        w.config.attack.seed = seed;
        w
    }
}

#[derive(serde::Serialize)]
struct InfectionSummary<'a> {
    retrain: &'a TrainLog,
    trigger: &'a [Option<TriggerReport>],
    injection: &'a InjectionReport,
}

/// Loss curves, trigger objective and feature gaps of an infection as JSON.
pub fn write_infection_report(infection: &Infection, path: &Path) -> Result<()> {
    crate::metrics::write_json(
        &InfectionSummary {
            retrain: &infection.retrain_log,
            trigger: &infection.trigger_reports,
            injection: &infection.injection,
        },
        path,
    )
}
