#![allow(dead_code)]

use pmq_core::calib::TaskData;
use pmq_core::synthetic::{make_synthetic_tasks, SyntheticProblem, SyntheticSpec};
use pmq_core::{merge, Activation, CalibSet, Checkpoint, DType, Layer, Matrix, MergeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `X Xᵀ` with `n` random columns, plus `ridge` on the diagonal.
pub fn spd(rng: &mut ChaCha8Rng, d: usize, n: usize, ridge: f64) -> Matrix {
    normal(rng, d, n).gram().add_diag(ridge)
}

pub fn layer(id: &str, w: Matrix, bias: Option<Vec<f64>>, act: Activation) -> Layer {
    Layer {
        id: id.into(),
        weight: w,
        bias,
        activation: act,
    }
}

pub fn single(w: Matrix) -> Checkpoint {
    Checkpoint::new(vec![layer("l0", w, None, Activation::Identity)], DType::F64).unwrap()
}

/// Random sequential checkpoint with relu hidden layers and biases.
pub fn random_checkpoint(rng: &mut ChaCha8Rng, dims: &[usize]) -> Checkpoint {
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|l| {
            let w = normal(rng, dims[l + 1], dims[l]).scale(1.0 / (dims[l] as f64).sqrt());
            let b: Vec<f64> = (0..dims[l + 1])
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let act = if l + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layer(&format!("fc{l}"), w, Some(b), act)
        })
        .collect();
    Checkpoint::new(layers, DType::F64).unwrap()
}

pub fn calib_from(rng: &mut ChaCha8Rng, k: usize, d: usize, n: usize) -> CalibSet {
    let tasks = (0..k)
        .map(|_| TaskData {
            inputs: normal(rng, d, n),
            targets: None,
        })
        .collect();
    CalibSet::new(tasks, 0).unwrap()
}

/// Small trained-expert problem for fast pipeline tests.
pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        dims: vec![6, 10, 8, 4],
        samples_per_task: 24,
        heldout_per_task: 24,
        train_samples: 32,
        train_steps: 30,
        ..Default::default()
    }
}

pub fn merged_problem(seed: u64, spec: &SyntheticSpec) -> (SyntheticProblem, Checkpoint) {
    let p = make_synthetic_tasks(seed, spec).unwrap();
    let m = merge(&MergeSpec::default(), &p.base, &p.experts).unwrap();
    (p, m)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
