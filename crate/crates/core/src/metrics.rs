//! Attack success rate, clean accuracy and repeated-run aggregation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;
use crate::trigger::TriggerSpec;

/// Share of triggered inputs classified as `target`.
pub fn attack_success_rate(
    model: &ModelGraph,
    trigger: &TriggerSpec,
    x_eval: &Tensor,
    target: usize,
) -> Result<f64> {
    if target >= model.class_count() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: model.class_count(),
        });
    }
    if x_eval.batch() == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let pred = model.predict(&trigger.apply(x_eval)?)?;
    Ok(pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64)
}

/// [`attack_success_rate`] over the samples of `data` not labeled `target`.
pub fn attack_success_rate_on(
    model: &ModelGraph,
    trigger: &TriggerSpec,
    data: &LabeledDataset,
    target: usize,
) -> Result<f64> {
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| data.labels()[i] != target)
        .collect();
    attack_success_rate(model, trigger, data.subset(&keep).images(), target)
}

/// Top-1 accuracy on clean data.
pub fn clean_accuracy(model: &ModelGraph, data: &LabeledDataset) -> Result<f64> {
    crate::train::accuracy(model, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub seed: u64,
    pub attack_success_rate: f64,
    pub clean_accuracy: f64,
    pub eval_samples: usize,
    pub test_samples: usize,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.attack_success_rate)
            && (0.0..=1.0).contains(&self.clean_accuracy)
            && self.eval_samples > 0
            && self.test_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid metrics record {self:?}"
            )))
        }
    }
}

/// Mean, min and max of a metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len().max(1) as f64;
        Stat {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment: String,
    pub runs: usize,
    pub attack_success_rate: Stat,
    pub clean_accuracy: Stat,
    pub records: Vec<MetricsRecord>,
}

impl Aggregate {
    pub fn from_records(experiment: &str, records: Vec<MetricsRecord>) -> Aggregate {
        let asr: Vec<f64> = records.iter().map(|r| r.attack_success_rate).collect();
        let acc: Vec<f64> = records.iter().map(|r| r.clean_accuracy).collect();
        Aggregate {
            experiment: experiment.to_string(),
            runs: records.len(),
            attack_success_rate: Stat::of(&asr),
            clean_accuracy: Stat::of(&acc),
            records,
        }
    }
}

/// Seed of run `i` derived from `base`.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(run as u64 + 1)
}

/// Runs `experiment` `runs` times with derived seeds and aggregates.
pub fn run_repeated(
    name: &str,
    runs: usize,
    base_seed: u64,
    mut experiment: impl FnMut(u64) -> Result<MetricsRecord>,
) -> Result<Aggregate> {
    if runs == 0 {
        return Err(Error::InvalidArgument(
            "at least one run is required".into(),
        ));
    }
    let records = (0..runs)
        .map(|i| experiment(run_seed(base_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregate::from_records(name, records))
}

pub fn write_records_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::trigger::{default_mask, random_pattern};

    fn record(seed: u64, asr: f64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "x".into(),
            seed,
            attack_success_rate: asr,
            clean_accuracy: acc,
            eval_samples: 10,
            test_samples: 10,
        }
    }

    #[test]
    fn constant_output_model_has_full_success() {
        let mut m = ModelBuilder::new(1, 6, 6).fc(4).softmax_head(3).build(0);
        let pos = m.layers().len() - 1;
        let head = m.layer_params_mut(pos).unwrap();
        head.weight.data_mut().fill(0.0);
        head.bias.data_mut().copy_from_slice(&[0.0, 5.0, 0.0]);
        let t = TriggerSpec::new(default_mask(1, 6, 6), random_pattern(&[1, 6, 6], 0), 1).unwrap();
        let x = random_pattern(&[7, 1, 6, 6], 1);
        assert_eq!(attack_success_rate(&m, &t, &x, 1).unwrap(), 1.0);
        assert_eq!(attack_success_rate(&m, &t, &x, 0).unwrap(), 0.0);
        assert!(attack_success_rate(&m, &t, &x, 3).is_err());
        let data = LabeledDataset::new(x, vec![0, 1, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(attack_success_rate_on(&m, &t, &data, 1).unwrap(), 1.0);
        let only_target = data.subset(&[1, 2]);
        assert!(attack_success_rate_on(&m, &t, &only_target, 1).is_err());
    }

    #[test]
    fn single_run_mean_is_the_record() {
        let agg = run_repeated("one", 1, 5, |s| Ok(record(s, 0.4, 0.9))).unwrap();
        assert_eq!(agg.attack_success_rate.mean, 0.4);
        assert_eq!(agg.records[0].seed, run_seed(5, 0));
        assert!(run_repeated("none", 0, 5, |s| Ok(record(s, 0.0, 0.0))).is_err());
    }

    #[test]
    fn aggregate_matches_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let agg = run_repeated("r", 4, 1, |s| {
            Ok(record(s, (s % 7) as f64 / 7.0, (s % 5) as f64 / 5.0))
        })
        .unwrap();
        write_records_csv(&agg.records, &path).unwrap();
        let rows = read_records_csv(&path).unwrap();
        assert_eq!(rows, agg.records);
        let mean = rows.iter().map(|r| r.attack_success_rate).sum::<f64>() / 4.0;
        assert!((mean - agg.attack_success_rate.mean).abs() < 1e-15);
        let max = rows.iter().map(|r| r.clean_accuracy).fold(0.0, f64::max);
        assert_eq!(max, agg.clean_accuracy.max);
    }

    #[test]
    fn record_validation() {
        assert!(record(0, 0.5, 0.5).validate().is_ok());
        assert!(record(0, 1.5, 0.5).validate().is_err());
    }
}
