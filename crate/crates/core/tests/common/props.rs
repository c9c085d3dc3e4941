//! Seeded invariant checks. Each returns a description of the first
//! violation.

use latent_backdoor::attack::{
    pairwise_objective, per_sample_gaps, wipe_target_trace, FeatureTarget,
};
use latent_backdoor::container::{
    model_from_bytes, model_to_bytes, trigger_from_bytes, trigger_to_bytes, TriggerRecord,
};
use latent_backdoor::data::make_synthetic;
use latent_backdoor::model::{ModelBuilder, ModelGraph};
use latent_backdoor::optim::SgdConfig;
use latent_backdoor::transfer::{build_student, fine_tune, TransferConfig};
use latent_backdoor::trigger::{random_pattern, square_mask, TriggerSpec};
use latent_backdoor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

pub fn small_model(seed: u64, padded: bool) -> ModelGraph {
    let b = ModelBuilder::new(1, 10, 10);
    let b = if padded {
        b.conv_same(3, 3)
    } else {
        b.conv(3, 3, 1)
    };
    b.pool(2, 2).fc(8).softmax_head(4).build(seed)
}

pub fn images(n: usize, seed: u64) -> Tensor {
    Tensor::uniform(
        &[n, 1, 10, 10],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn quick_transfer(frozen: usize) -> TransferConfig {
    TransferConfig {
        frozen_layers: frozen,
        student_classes: 3,
        sgd: SgdConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            ..SgdConfig::default()
        },
        validation_fraction: 0.0,
        ..TransferConfig::default()
    }
}

/// Stamping agrees with a per-pixel loop and is idempotent.
pub fn trigger_matches_pixel_loop(seed: u64, side: usize, n: usize) -> Check {
    let t = TriggerSpec::new(
        square_mask(1, 10, 10, side),
        random_pattern(&[1, 10, 10], seed),
        2,
    )
    .map_err(|e| e.to_string())?;
    let x = images(n, seed ^ 1);
    let y = t.apply(&x).map_err(|e| e.to_string())?;
    for i in 0..n {
        for p in 0..100 {
            let (r, c) = (p / 10, p % 10);
            let inside = r >= 10 - side && c >= 10 - side;
            let want = if inside {
                t.pattern().data()[p]
            } else {
                x.sample(i)[p]
            };
            ensure!(
                y.sample(i)[p].to_bits() == want.to_bits(),
                "sample {i} pixel {p}: {} != {want}",
                y.sample(i)[p]
            );
        }
    }
    ensure!(
        t.apply(&y).unwrap().bit_eq(&y),
        "stamping twice changed the image"
    );
    Ok(())
}

/// The mean-identity form of the trigger objective equals the double loop
/// over poisoned and target features.
pub fn mean_identity_matches_pairwise_loop(seed: u64, n: usize, m: usize) -> Check {
    let model = small_model(seed, false);
    let pool = images(n, seed ^ 2);
    let tgt = images(m, seed ^ 3);
    for layer in 1..=3 {
        let poisoned = model.feature_at(layer, &pool).unwrap();
        let target = model.feature_at(layer, &tgt).unwrap();
        let phi = FeatureTarget::compute(&model, layer, &tgt).unwrap();
        let spread = per_sample_gaps(&target, phi.phi()).iter().sum::<f64>() / m as f64;
        let via = per_sample_gaps(&poisoned, phi.phi()).iter().sum::<f64>() / n as f64 + spread;
        let direct = pairwise_objective(&poisoned, &target);
        ensure!(
            (direct - via).abs() <= 1e-10 * direct.abs().max(1.0),
            "layer {layer}: loop {direct} vs identity {via}"
        );
    }
    Ok(())
}

pub fn phi_is_feature_mean(seed: u64, m: usize, layer: usize) -> Check {
    let model = small_model(seed, true);
    let tgt = images(m, seed ^ 4);
    let f = model.feature_at(layer, &tgt).unwrap();
    let phi = FeatureTarget::compute(&model, layer, &tgt).unwrap();
    ensure!(phi.phi().numel() == f.sample_len(), "phi has wrong size");
    for j in 0..f.sample_len() {
        let mean = (0..m).map(|i| f.sample(i)[j]).sum::<f64>() / m as f64;
        let err = (phi.phi().data()[j] - mean).abs();
        ensure!(err < 1e-10, "feature {j}: error {err:e}");
    }
    Ok(())
}

pub fn model_bytes_round_trip(seed: u64, padded: bool, frozen: usize) -> Check {
    let mut model = small_model(seed, padded);
    model.freeze_through(frozen);
    let bytes = model_to_bytes(&model);
    let back = model_from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure!(model_to_bytes(&back) == bytes, "re-encoding differs");
    ensure!(
        back.frozen_count() == model.frozen_count(),
        "frozen count lost"
    );
    let x = images(2, seed);
    ensure!(
        back.forward(&x)
            .unwrap()
            .bit_eq(&model.forward(&x).unwrap()),
        "outputs differ after reload"
    );
    Ok(())
}

pub fn trigger_bytes_round_trip(seed: u64, side: usize, layer: usize) -> Check {
    let trigger = TriggerSpec::new(
        square_mask(1, 10, 10, side),
        random_pattern(&[1, 10, 10], seed),
        layer,
    )
    .map_err(|e| e.to_string())?;
    let record = TriggerRecord {
        trigger,
        target_name: format!("digit {}", seed % 10),
        seed,
    };
    let back = trigger_from_bytes(&trigger_to_bytes(&record)).map_err(|e| e.to_string())?;
    ensure!(back == record, "trigger record changed");
    Ok(())
}

/// Restoring the head after retraining changes only the head.
pub fn wipe_touches_only_head(seed: u64) -> Check {
    let teacher = small_model(seed, false);
    let snapshot = teacher.head_snapshot().unwrap();
    let mut retrained = teacher.replace_classification_layer(5, seed ^ 9).unwrap();
    let fc = retrained.param_position(2).unwrap();
    retrained.prune_units(fc, &[0]).unwrap();
    let wiped = wipe_target_trace(&retrained, &snapshot).map_err(|e| e.to_string())?;
    ensure!(
        wiped.prefix_identical(&retrained, teacher.depth() - 1),
        "body changed by the wipe"
    );
    let head = wiped.param_position(teacher.depth()).unwrap();
    ensure!(
        wiped.layer_bytes(head) == teacher.layer_bytes(head),
        "head not restored"
    );
    ensure!(wiped.class_count() == teacher.class_count(), "class count");
    Ok(())
}

/// Fine-tuning leaves layers `1..=K` bit-identical and moves the rest.
pub fn frozen_layers_byte_identical(seed: u64) -> Check {
    let teacher = small_model(seed, true);
    let data = make_synthetic(3, 8, 10, seed ^ 11).unwrap();
    for frozen in 0..=2 {
        let cfg = quick_transfer(frozen);
        let student = build_student(&teacher, &cfg).unwrap();
        let (tuned, _) = fine_tune(&student, &data, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            tuned.prefix_identical(&teacher, frozen),
            "K={frozen}: prefix moved"
        );
        for k in 1..=frozen {
            let pos = teacher.param_position(k).unwrap();
            ensure!(
                tuned.layer_bytes(pos) == teacher.layer_bytes(pos),
                "K={frozen}: layer {k} moved"
            );
        }
        if frozen < 2 {
            let pos = teacher.param_position(2).unwrap();
            ensure!(
                tuned.layer_bytes(pos) != teacher.layer_bytes(pos),
                "K={frozen}: trainable layer 2 did not move"
            );
        }
    }
    Ok(())
}

/// Two identical fine-tuning runs produce identical bytes.
pub fn fine_tune_is_deterministic(seed: u64) -> Check {
    let teacher = small_model(seed, false);
    let data = make_synthetic(3, 8, 10, seed ^ 12).unwrap();
    let cfg = quick_transfer(1);
    let run = || {
        let student = build_student(&teacher, &cfg).unwrap();
        model_to_bytes(&fine_tune(&student, &data, &cfg).unwrap().0)
    };
    ensure!(run() == run(), "fine-tuning is not reproducible");
    Ok(())
}
