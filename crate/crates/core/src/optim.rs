//! Momentum SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, ParamGrads, ParamKey, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be a non-negative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `v ← μ·v + g`, `w ← w − η·v`, applied to every non-frozen parameter.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(config: &SgdConfig) -> Self {
        MomentumSgd {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates one parameter slice in place.
    pub fn update(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) {
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| vec![0.0; param.len()]);
        for ((w, vi), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g;
            *w -= self.learning_rate * *vi;
        }
    }

    /// One step over the model. Every trainable parameter must have a
    /// gradient; frozen layers are left untouched. Gradient rows of pruned
    /// units are dropped so those units stay at zero.
    pub fn step(&mut self, model: &mut ModelGraph, grads: &ParamGrads) -> Result<()> {
        let trainable: Vec<(usize, Vec<usize>)> = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.frozen && l.kind.has_params())
            .map(|(pos, l)| (pos, l.pruned.clone()))
            .collect();
        for &(layer, _) in &trainable {
            for slot in [Slot::Weight, Slot::Bias] {
                if !grads.contains_key(&ParamKey { layer, slot }) {
                    return Err(Error::MissingGradient {
                        layer,
                        slot: slot.name(),
                    });
                }
            }
        }
        for (layer, pruned) in trainable {
            let params = model.layer_params_mut(layer).expect("parametrized layer");
            for slot in [Slot::Weight, Slot::Bias] {
                let key = ParamKey { layer, slot };
                let tensor = match slot {
                    Slot::Weight => &mut params.weight,
                    Slot::Bias => &mut params.bias,
                };
                let g = &grads[&key];
                tensor.expect_shape("sgd gradient", g.shape())?;
                if pruned.is_empty() {
                    self.update(key, tensor.data_mut(), g.data());
                } else {
                    let row = tensor.sample_len();
                    let mut masked = g.data().to_vec();
                    for &u in &pruned {
                        masked[u * row..(u + 1) * row].fill(0.0);
                    }
                    self.update(key, tensor.data_mut(), &masked);
                }
            }
        }
        model.enforce_pruning();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::tensor::Tensor;

    fn key() -> ParamKey {
        ParamKey {
            layer: 0,
            slot: Slot::Weight,
        }
    }

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn zero_rate_is_noop() {
        let mut opt = MomentumSgd::new(&cfg(0.0, 0.9));
        let mut w = vec![1.5, -2.0];
        opt.update(key(), &mut w, &[3.0, 4.0]);
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn plain_descent_step() {
        let mut opt = MomentumSgd::new(&cfg(1.0, 0.0));
        let mut w = vec![5.0];
        opt.update(key(), &mut w, &[2.0]);
        assert_eq!(w, vec![3.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut opt = MomentumSgd::new(&cfg(lr, mu));
        let mut w = vec![1.0];
        opt.update(key(), &mut w, &[g]);
        opt.update(key(), &mut w, &[g]);
        // v1 = g, v2 = mu*g + g
        let v1 = g;
        let v2 = mu * v1 + g;
        let want = 1.0 - lr * v1 - lr * v2;
        assert!((w[0] - want).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_error_and_frozen_untouched() {
        let mut m = ModelBuilder::new(1, 4, 4).fc(3).softmax_head(2).build(0);
        m.freeze_through(1);
        let before = m.clone();
        let mut opt = MomentumSgd::new(&cfg(0.5, 0.0));
        let err = opt.step(&mut m, &ParamGrads::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient { layer: 1, .. }));
        let mut grads = ParamGrads::new();
        for slot in [Slot::Weight, Slot::Bias] {
            let shape = match slot {
                Slot::Weight => vec![2, 3],
                Slot::Bias => vec![2],
            };
            grads.insert(ParamKey { layer: 1, slot }, Tensor::full(&shape, 1.0));
        }
        opt.step(&mut m, &grads).unwrap();
        assert_eq!(m.layer_bytes(0), before.layer_bytes(0));
        assert_ne!(m.layer_bytes(1), before.layer_bytes(1));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.1, 1.0).validate().is_err());
        assert!(cfg(-0.1, 0.0).validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
