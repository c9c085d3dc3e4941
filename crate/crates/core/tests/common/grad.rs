//! Central-difference gradient checks for every differentiable operation.

use latent_backdoor::autodiff::{Tape, Var};
use latent_backdoor::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub const KINDS: &[&str] = &[
    "conv2d",
    "conv2d_padded",
    "max_pool2d",
    "fully_connected",
    "relu",
    "softmax_cross_entropy",
    "add_mul",
    "mse",
    "network",
];

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn scalar_loss(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest relative error between analytic and central-difference gradients
/// over every input element.
fn max_relative_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (scalar_loss(build, &plus) - scalar_loss(build, &minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Distinct values at least 0.01 apart and away from zero, so no probe
/// crosses a relu kink or a pooling tie.
fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 + 0.5 - n as f64 / 2.0) * 0.02 + 0.005)
        .collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Projects a tensor output to a scalar with fixed random weights.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.value(out).shape(), &mut rng(seed ^ 0xface));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn case(kind: &str, seed: u64) -> (Vec<Tensor>, Box<Build>) {
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(kind.len() as u64));
    match kind {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let inputs = vec![
                uniform(&[2, 2, 6, 6], &mut r),
                uniform(&[3, 2, 3, 3], &mut r),
                uniform(&[3], &mut r),
            ];
            let build: Box<Build> = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, 0)?;
                project(t, y, seed)
            });
            (inputs, build)
        }
        "conv2d_padded" => {
            let inputs = vec![
                uniform(&[2, 1, 5, 5], &mut r),
                uniform(&[2, 1, 3, 3], &mut r),
                uniform(&[2], &mut r),
            ];
            let build: Box<Build> = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(t, y, seed)
            });
            (inputs, build)
        }
        "max_pool2d" => {
            let stride = 1 + (seed % 2) as usize;
            let inputs = vec![separated(&[2, 2, 4, 4], &mut r)];
            let build: Box<Build> = Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], 2, stride)?;
                project(t, y, seed)
            });
            (inputs, build)
        }
        "fully_connected" => {
            let inputs = vec![
                uniform(&[3, 2, 2, 2], &mut r),
                uniform(&[4, 8], &mut r),
                uniform(&[4], &mut r),
            ];
            let build: Box<Build> = Box::new(move |t, v| {
                let y = t.fully_connected(v[0], v[1], v[2])?;
                project(t, y, seed)
            });
            (inputs, build)
        }
        "relu" => {
            let inputs = vec![separated(&[3, 7], &mut r)];
            let build: Box<Build> = Box::new(move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, seed)
            });
            (inputs, build)
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let inputs = vec![Tensor::uniform(&[4, 5], -3.0, 3.0, &mut r)];
            let build: Box<Build> = Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels));
            (inputs, build)
        }
        "add_mul" => {
            let inputs = vec![
                uniform(&[3, 2, 4], &mut r),
                uniform(&[1, 2, 4], &mut r),
                uniform(&[1, 2, 4], &mut r),
            ];
            let build: Box<Build> = Box::new(move |t, v| {
                let s = t.add(v[0], v[1])?;
                let y = t.mul(s, v[2])?;
                project(t, y, seed)
            });
            (inputs, build)
        }
        "mse" => {
            let inputs = vec![uniform(&[3, 5], &mut r), uniform(&[3, 5], &mut r)];
            let build: Box<Build> = Box::new(|t, v| t.mse(v[0], v[1]));
            (inputs, build)
        }
        "network" => {
            let labels: Vec<usize> = (0..2).map(|_| r.gen_range(0..3)).collect();
            let inputs = vec![
                uniform(&[2, 1, 6, 6], &mut r),
                uniform(&[2, 1, 3, 3], &mut r),
                uniform(&[2], &mut r),
                uniform(&[3, 8], &mut r),
                uniform(&[3], &mut r),
            ];
            let build: Box<Build> = Box::new(move |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 1, 0)?;
                let a = t.relu(c);
                let p = t.max_pool2d(a, 2, 2)?;
                let f = t.fully_connected(p, v[3], v[4])?;
                t.softmax_cross_entropy(f, &labels)
            });
            (inputs, build)
        }
        other => panic!("unknown kind {other}"),
    }
}

/// Worst relative error of `kind` over [`SEEDS`] random cases.
pub fn worst_error(kind: &str) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let (inputs, build) = case(kind, seed);
            max_relative_error(build.as_ref(), &inputs)
        })
        .fold(0.0, f64::max)
}
