//! Defenses evaluated against the student: pruning weak units, blurring
//! inputs, and fine-tuning more layers than the teacher advises.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;
use crate::transfer::{build_student, fine_tune_with, TransferConfig};
use crate::trigger::TriggerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep_param: f64,
    pub attack_success_rate: f64,
    pub clean_accuracy: f64,
    pub seed: u64,
}

/// One defense curve, ordered by sweep parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSweepResult {
    pub defense: String,
    pub points: Vec<SweepPoint>,
}

impl DefenseSweepResult {
    pub fn new(defense: &str, mut points: Vec<SweepPoint>) -> Self {
        points.sort_by(|a, b| a.sweep_param.total_cmp(&b.sweep_param));
        DefenseSweepResult {
            defense: defense.to_string(),
            points,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(defense: &str, path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let points = r
            .deserialize()
            .map(|row| row.map_err(Error::from))
            .collect::<Result<Vec<SweepPoint>>>()?;
        Ok(DefenseSweepResult::new(defense, points))
    }

    pub fn at(&self, param: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.sweep_param == param)
    }
}

/// Mean absolute activation of every unit of indexed layer `layer` over
/// `x`. Convolution channels are averaged over positions.
pub fn unit_activity(model: &ModelGraph, layer: usize, x: &Tensor) -> Result<Vec<f64>> {
    let pos = model.param_position(layer)?;
    let units = model.layers()[pos]
        .kind
        .units()
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no units")))?;
    let feats = model.forward_range(x, 0..pos + 1)?;
    let per_unit = feats.sample_len() / units;
    let mut act = vec![0.0; units];
    for i in 0..feats.batch() {
        for (u, chunk) in feats.sample(i).chunks(per_unit).enumerate() {
            act[u] += chunk.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let denom = (feats.batch() * per_unit) as f64;
    Ok(act.into_iter().map(|a| a / denom).collect())
}

/// Indices of the `fraction` least active units, ties broken by index.
pub fn weakest_units(activity: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    let count = (fraction * activity.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..activity.len()).collect();
    order.sort_by(|&a, &b| activity[a].total_cmp(&activity[b]).then(a.cmp(&b)));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Prunes the least active `fraction` of units of indexed layer `layer`
/// (measured on clean data), then fine-tunes on the same data with the
/// student's freezing. Nothing is pruned or retrained at fraction 0.
pub fn fine_prune(
    student: &ModelGraph,
    fraction: f64,
    layer: usize,
    x_clean: &LabeledDataset,
    config: &TransferConfig,
) -> Result<(ModelGraph, Vec<usize>)> {
    let activity = unit_activity(student, layer, x_clean.images())?;
    let units = weakest_units(&activity, fraction)?;
    if units.is_empty() {
        return Ok((student.clone(), units));
    }
    let mut pruned = student.clone();
    pruned.prune_units(student.param_position(layer)?, &units)?;
    let (tuned, _) = fine_tune_with(&pruned, x_clean, config, false)?;
    Ok((tuned, units))
}

/// Evaluates a model on poisoned eval inputs and clean test data.
fn measure(
    model: &ModelGraph,
    trigger: &TriggerSpec,
    x_eval: &Tensor,
    test: &LabeledDataset,
    target: usize,
) -> Result<(f64, f64)> {
    Ok((
        crate::metrics::attack_success_rate(model, trigger, x_eval, target)?,
        crate::metrics::clean_accuracy(model, test)?,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn fine_prune_sweep(
    student: &ModelGraph,
    trigger: &TriggerSpec,
    fractions: &[f64],
    layer: usize,
    x_clean: &LabeledDataset,
    x_eval: &Tensor,
    test: &LabeledDataset,
    target: usize,
    config: &TransferConfig,
) -> Result<DefenseSweepResult> {
    let mut points = Vec::new();
    for &f in fractions {
        let (m, units) = fine_prune(student, f, layer, x_clean, config)?;
        let pos = m.param_position(layer)?;
        if m.layers()[pos].pruned != units || !m.pruned_units_zero(pos) {
            return Err(Error::InvalidArgument(
                "pruned units changed during fine-tuning".into(),
            ));
        }
        let (asr, acc) = measure(&m, trigger, x_eval, test, target)?;
        log::info!("fine-prune {f:.2}: success {asr:.3} accuracy {acc:.3}");
        points.push(SweepPoint {
            sweep_param: f,
            attack_success_rate: asr,
            clean_accuracy: acc,
            seed: config.sgd.seed,
        });
    }
    Ok(DefenseSweepResult::new("fine-prune", points))
}

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::EvenKernelSize(size));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma {sigma} must be positive"
        )));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Default blur width for a kernel size.
pub fn default_sigma(size: usize) -> f64 {
    size as f64 / 3.0
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur of `[n, c, h, w]` images with reflected borders.
pub fn gaussian_blur(x: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(size, sigma)?;
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "gaussian_blur",
            expected: vec![0, 0, 0, 0],
            actual: shape,
        });
    }
    if size == 1 {
        return Ok(x.clone());
    }
    let (h, w) = (shape[2], shape[3]);
    let r = (size / 2) as isize;
    let mut tmp = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for (plane, src) in x.data().chunks(h * w).enumerate() {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    let sx = reflect(xx as isize + t as isize - r, w);
                    acc += kw * src[y * w + sx];
                }
                tmp[base + y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kw * tmp[base + sy * w + xx];
                }
                out[base + y * w + xx] = acc;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Success on blurred poisoned inputs and accuracy on blurred clean test
/// data, per kernel size.
pub fn blur_defense_sweep(
    student: &ModelGraph,
    trigger: &TriggerSpec,
    x_eval: &Tensor,
    test: &LabeledDataset,
    target: usize,
    kernel_sizes: &[usize],
) -> Result<DefenseSweepResult> {
    let poisoned = trigger.apply(x_eval)?;
    let mut points = Vec::new();
    for &k in kernel_sizes {
        let sigma = default_sigma(k);
        let blurred_eval = gaussian_blur(&poisoned, k, sigma)?;
        let pred = student.predict(&blurred_eval)?;
        let asr = pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64;
        let blurred_test = LabeledDataset::with_ids(
            gaussian_blur(test.images(), k, sigma)?,
            test.labels().to_vec(),
            test.ids().to_vec(),
            test.classes(),
        )?;
        let acc = crate::metrics::clean_accuracy(student, &blurred_test)?;
        log::info!("blur {k}: success {asr:.3} accuracy {acc:.3}");
        points.push(SweepPoint {
            sweep_param: k as f64,
            attack_success_rate: asr,
            clean_accuracy: acc,
            seed: 0,
        });
    }
    Ok(DefenseSweepResult::new("blur", points))
}

/// Builds and fine-tunes a student from the infected teacher for every
/// frozen-layer count `K′`.
#[allow(clippy::too_many_arguments)]
pub fn multilayer_tuning_sweep(
    teacher: &ModelGraph,
    x_student: &LabeledDataset,
    trigger: &TriggerSpec,
    x_eval: &Tensor,
    test: &LabeledDataset,
    target: usize,
    frozen_counts: &[usize],
    config: &TransferConfig,
) -> Result<DefenseSweepResult> {
    let mut points = Vec::new();
    for &k in frozen_counts {
        let cfg = TransferConfig {
            frozen_layers: k,
            ..config.clone()
        };
        let student = build_student(teacher, &cfg)?;
        let (tuned, _) = fine_tune_with(&student, x_student, &cfg, true)?;
        let (asr, acc) = measure(&tuned, trigger, x_eval, test, target)?;
        log::info!("tune with K={k}: success {asr:.3} accuracy {acc:.3}");
        points.push(SweepPoint {
            sweep_param: k as f64,
            attack_success_rate: asr,
            clean_accuracy: acc,
            seed: config.sgd.seed,
        });
    }
    Ok(DefenseSweepResult::new("multilayer", points))
}

/// How a pruning curve compares with the expected shape: success only falls
/// below `success_floor` where accuracy has dropped by `min_accuracy_loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneCurveCheck {
    pub matches: bool,
    /// Points where success is low but accuracy largely intact.
    pub violations: Vec<SweepPoint>,
    /// First fraction with success below the floor, if any.
    pub first_defeated: Option<f64>,
}

pub fn check_prune_curve(
    curve: &DefenseSweepResult,
    baseline_accuracy: f64,
    success_floor: f64,
    min_accuracy_loss: f64,
) -> PruneCurveCheck {
    let low: Vec<&SweepPoint> = curve
        .points
        .iter()
        .filter(|p| p.attack_success_rate < success_floor)
        .collect();
    let violations: Vec<SweepPoint> = low
        .iter()
        .filter(|p| baseline_accuracy - p.clean_accuracy < min_accuracy_loss)
        .map(|&&p| p)
        .collect();
    PruneCurveCheck {
        matches: violations.is_empty(),
        violations,
        first_defeated: low.first().map(|p| p.sweep_param),
    }
}

/// Largest rise of success between any kernel size and a larger one.
pub fn max_success_rise(curve: &DefenseSweepResult) -> f64 {
    let mut rise: f64 = 0.0;
    for (i, a) in curve.points.iter().enumerate() {
        for b in &curve.points[i + 1..] {
            rise = rise.max(b.attack_success_rate - a.attack_success_rate);
        }
    }
    rise
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for size in [1, 3, 5, 9] {
            let k = gaussian_kernel(size, default_sigma(size)).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..size {
                assert_eq!(k[i], k[size - 1 - i]);
            }
        }
        assert!(matches!(
            gaussian_kernel(4, 1.0),
            Err(Error::EvenKernelSize(4))
        ));
        assert!(matches!(
            gaussian_kernel(0, 1.0),
            Err(Error::EvenKernelSize(0))
        ));
    }

    #[test]
    fn impulse_gives_outer_product_of_weights() {
        let mut x = Tensor::zeros(&[1, 1, 7, 7]);
        x.data_mut()[3 * 7 + 3] = 1.0;
        let sigma = 1.0;
        let out = gaussian_blur(&x, 3, sigma).unwrap();
        let e = (-0.5f64).exp();
        let w = [
            e / (1.0 + 2.0 * e),
            1.0 / (1.0 + 2.0 * e),
            e / (1.0 + 2.0 * e),
        ];
        for dy in 0..3 {
            for dx in 0..3 {
                let got = out.data()[(2 + dy) * 7 + 2 + dx];
                assert!((got - w[dy] * w[dx]).abs() < 1e-15);
            }
        }
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn constant_image_and_identity_kernel() {
        let x = Tensor::full(&[2, 1, 5, 6], 0.3);
        let out = gaussian_blur(&x, 5, 1.7).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
        let y = crate::trigger::random_pattern(&[1, 2, 4, 4], 9);
        assert!(gaussian_blur(&y, 1, 1.0).unwrap().bit_eq(&y));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-2, 1), 0);
    }

    #[test]
    fn weakest_units_order() {
        let act = [0.5, 0.1, 0.1, 0.9];
        assert_eq!(weakest_units(&act, 0.5).unwrap(), vec![1, 2]);
        assert!(weakest_units(&act, 0.0).unwrap().is_empty());
        assert_eq!(weakest_units(&act, 1.0).unwrap().len(), 4);
        assert!(matches!(
            weakest_units(&act, 1.5),
            Err(Error::FractionOutOfRange(_))
        ));
    }

    #[test]
    fn curve_check_flags_cheap_defeat() {
        let pts = |v: &[(f64, f64, f64)]| {
            DefenseSweepResult::new(
                "fine-prune",
                v.iter()
                    .map(|&(f, a, c)| SweepPoint {
                        sweep_param: f,
                        attack_success_rate: a,
                        clean_accuracy: c,
                        seed: 0,
                    })
                    .collect(),
            )
        };
        let good = pts(&[(0.0, 0.9, 0.95), (0.5, 0.8, 0.9), (0.9, 0.1, 0.5)]);
        let c = check_prune_curve(&good, 0.95, 0.2, 0.2);
        assert!(c.matches);
        assert_eq!(c.first_defeated, Some(0.9));
        let bad = pts(&[(0.0, 0.9, 0.95), (0.3, 0.1, 0.93)]);
        assert!(!check_prune_curve(&bad, 0.95, 0.2, 0.2).matches);
        assert_eq!(
            max_success_rise(&pts(&[(1.0, 0.5, 0.0), (3.0, 0.6, 0.0)])),
            0.6 - 0.5
        );
    }
}
