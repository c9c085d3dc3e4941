//! Trigger masks and patterns, and stamping them onto images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of the image covered by the default square mask.
pub const DEFAULT_MASK_AREA: f64 = 0.04;

/// A recorded latent backdoor: binary mask `m`, pattern `Δ` and the layer
/// index `K_t` whose features the trigger is bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    mask: Tensor,
    pattern: Tensor,
    inject_layer: usize,
}

impl TriggerSpec {
    /// Validates that `mask` is binary and shaped like `pattern`. The pattern
    /// is clamped into `[0, 1]`.
    pub fn new(mask: Tensor, pattern: Tensor, inject_layer: usize) -> Result<Self> {
        if mask.shape() != pattern.shape() {
            return Err(Error::ShapeMismatch {
                op: "trigger",
                expected: mask.shape().to_vec(),
                actual: pattern.shape().to_vec(),
            });
        }
        check_binary(&mask)?;
        if inject_layer == 0 {
            return Err(Error::InvalidArgument(
                "injection layer index starts at 1".into(),
            ));
        }
        let pattern = pattern.map(|v| v.clamp(0.0, 1.0));
        Ok(TriggerSpec {
            mask,
            pattern,
            inject_layer,
        })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn pattern(&self) -> &Tensor {
        &self.pattern
    }

    pub fn inject_layer(&self) -> usize {
        self.inject_layer
    }

    pub fn image_shape(&self) -> &[usize] {
        self.mask.shape()
    }

    /// Number of pixels the mask selects.
    pub fn mask_area(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn with_pattern(&self, pattern: Tensor) -> Result<Self> {
        TriggerSpec::new(self.mask.clone(), pattern, self.inject_layer)
    }

    /// Stamps the trigger onto every image of a batch `[n, c, h, w]`:
    /// `(1 − m) ∘ x + m ∘ Δ`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() < 2 || x.shape()[1..] != *self.mask.shape() {
            let mut expected = vec![x.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(self.mask.shape());
            return Err(Error::ShapeMismatch {
                op: "apply_trigger",
                expected,
                actual: x.shape().to_vec(),
            });
        }
        let m = self.mask.data();
        let d = self.pattern.data();
        let per = m.len();
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(per) {
            for ((v, &mi), &di) in chunk.iter_mut().zip(m).zip(d) {
                *v = (1.0 - mi) * *v + mi * di;
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    match mask.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(Error::NonBinaryMask {
            index,
            value: mask.data()[index],
        }),
        None => Ok(()),
    }
}

/// Applies `trigger` to a batch. Free-function form of [`TriggerSpec::apply`].
pub fn apply_trigger(x: &Tensor, trigger: &TriggerSpec) -> Result<Tensor> {
    trigger.apply(x)
}

/// Side of the default square mask: `round(sqrt(0.04·H·W))`.
pub fn default_mask_side(height: usize, width: usize) -> usize {
    ((DEFAULT_MASK_AREA * (height * width) as f64).sqrt().round() as usize)
        .clamp(1, height.min(width))
}

/// Square mask in the bottom-right corner covering all channels.
pub fn default_mask(channels: usize, height: usize, width: usize) -> Tensor {
    square_mask(channels, height, width, default_mask_side(height, width))
}

pub fn square_mask(channels: usize, height: usize, width: usize, side: usize) -> Tensor {
    let mut m = Tensor::zeros(&[channels, height, width]);
    let data = m.data_mut();
    for c in 0..channels {
        for y in height - side..height {
            for x in width - side..width {
                data[(c * height + y) * width + x] = 1.0;
            }
        }
    }
    m
}

/// Pattern drawn uniformly from `[0, 1]`.
pub fn random_pattern(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 0.0, 1.0, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_side_for_digits() {
        assert_eq!(default_mask_side(28, 28), 6);
        let m = default_mask(1, 28, 28);
        assert_eq!(m.sum(), 36.0);
        assert_eq!(m.data()[27 * 28 + 27], 1.0);
        assert_eq!(m.data()[21 * 28 + 21], 0.0);
    }

    #[test]
    fn zero_and_full_masks() {
        let x = random_pattern(&[2, 1, 4, 4], 1);
        let delta = random_pattern(&[1, 4, 4], 2);
        let none = TriggerSpec::new(Tensor::zeros(&[1, 4, 4]), delta.clone(), 1).unwrap();
        assert!(none.apply(&x).unwrap().bit_eq(&x));
        let all = TriggerSpec::new(Tensor::full(&[1, 4, 4], 1.0), delta.clone(), 1).unwrap();
        let out = all.apply(&x).unwrap();
        assert_eq!(out.sample(0), delta.data());
        assert_eq!(out.sample(1), delta.data());
    }

    #[test]
    fn rejects_bad_masks() {
        let p = Tensor::zeros(&[1, 2, 2]);
        let err = TriggerSpec::new(Tensor::full(&[1, 2, 2], 0.5), p.clone(), 1).unwrap_err();
        assert!(matches!(err, Error::NonBinaryMask { index: 0, .. }));
        assert!(TriggerSpec::new(Tensor::zeros(&[1, 2, 3]), p, 1).is_err());
    }

    #[test]
    fn apply_is_idempotent() {
        let x = random_pattern(&[3, 1, 8, 8], 4);
        let t = TriggerSpec::new(default_mask(1, 8, 8), random_pattern(&[1, 8, 8], 5), 2).unwrap();
        let once = t.apply(&x).unwrap();
        assert!(t.apply(&once).unwrap().bit_eq(&once));
    }

    #[test]
    fn pattern_is_clamped() {
        let t = TriggerSpec::new(
            Tensor::full(&[1, 1, 2], 1.0),
            Tensor::new(vec![1, 1, 2], vec![-0.5, 1.5]).unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(t.pattern().data(), &[0.0, 1.0]);
    }
}
