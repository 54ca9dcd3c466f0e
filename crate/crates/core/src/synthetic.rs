//! Desk-scale synthetic experts.
//!
//! A random base MLP is shared by all tasks. Each task has its own Gaussian
//! input distribution (task-specific mean, diagonal covariance) and a teacher
//! network obtained by perturbing the base. Experts start from the base and
//! take a fixed number of full-batch gradient steps on squared loss against
//! their teacher, so every expert carries real task signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::calib::{CalibSet, TaskData};
use crate::checkpoint::{Activation, Checkpoint, DType, Layer};
use crate::error::{PmqError, Result};
use crate::matrix::Matrix;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertMode {
    /// Gradient steps from the base toward the task teacher.
    #[default]
    Train,
    /// The expert is the teacher itself; no optimization.
    Perturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    /// Layer widths `[d_0, d_1, …, d_L]`.
    pub dims: Vec<usize>,
    /// Hidden-layer activation; the last layer is always linear.
    pub activation: Activation,
    pub samples_per_task: usize,
    pub heldout_per_task: usize,
    pub train_samples: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    /// Standard deviation of the teacher perturbation, relative to the base init.
    pub task_shift: f64,
    /// Standard deviation of each task's input mean.
    pub input_shift: f64,
    pub mode: ExpertMode,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_tasks: 2,
            dims: vec![16, 32, 32, 8],
            activation: Activation::Relu,
            samples_per_task: 256,
            heldout_per_task: 256,
            train_samples: 256,
            train_steps: 200,
            learning_rate: 0.05,
            task_shift: 0.5,
            input_shift: 1.0,
            mode: ExpertMode::Train,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(PmqError::Config("num_tasks must be at least 1".into()));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(PmqError::Config(
                "dims must list at least two positive widths".into(),
            ));
        }
        if self.samples_per_task == 0 || self.heldout_per_task == 0 {
            return Err(PmqError::Config("sample counts must be positive".into()));
        }
        if self.mode == ExpertMode::Train && self.train_steps > 0 && self.train_samples == 0 {
            return Err(PmqError::Config("training needs train_samples > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub base: Checkpoint,
    pub experts: Vec<Checkpoint>,
    pub calib: CalibSet,
    pub heldout: CalibSet,
}

struct TaskDistribution {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl TaskDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let z = Normal::new(0.0, 1.0).unwrap();
        let d = self.mean.len();
        // column-major draw order so prefixes of a sample set are stable
        let mut m = Matrix::zeros(d, n);
        for j in 0..n {
            for i in 0..d {
                m.set(i, j, self.mean[i] + self.std[i] * z.sample(rng));
            }
        }
        m
    }
}

fn random_layers(rng: &mut ChaCha8Rng, dims: &[usize], hidden: Activation) -> Vec<Layer> {
    let n_layers = dims.len() - 1;
    (0..n_layers)
        .map(|l| {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let activation = if l + 1 == n_layers {
                Activation::Identity
            } else {
                hidden
            };
            let gain = if activation == Activation::Identity {
                1.0
            } else {
                2.0f64.sqrt()
            };
            let w = Normal::new(0.0, gain / (d_in as f64).sqrt()).unwrap();
            let b = Normal::new(0.0, 0.1).unwrap();
            Layer {
                id: format!("fc{l}"),
                weight: Matrix::from_fn(d_out, d_in, |_, _| w.sample(rng)),
                bias: Some((0..d_out).map(|_| b.sample(rng)).collect()),
                activation,
            }
        })
        .collect()
}

fn perturb(rng: &mut ChaCha8Rng, base: &Checkpoint, shift: f64) -> Checkpoint {
    let layers = base
        .layers()
        .iter()
        .map(|l| {
            let w = Normal::new(0.0, shift / (l.d_in() as f64).sqrt()).unwrap();
            let b = Normal::new(0.0, 0.1 * shift).unwrap();
            Layer {
                id: l.id.clone(),
                weight: Matrix::from_fn(l.d_out(), l.d_in(), |r, c| {
                    l.weight.get(r, c) + w.sample(rng)
                }),
                bias: l
                    .bias
                    .as_ref()
                    .map(|bs| bs.iter().map(|v| v + b.sample(rng)).collect()),
                activation: l.activation,
            }
        })
        .collect();
    Checkpoint::new(layers, base.dtype()).expect("perturbation keeps the architecture")
}

/// Mean over all entries of `(a − b)²`.
pub fn mean_squared_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    let n = d.data().len().max(1) as f64;
    Ok(crate::matrix::frobenius_sq(&d) / n)
}

/// Full-batch gradient descent on mean squared error, all layers and biases.
pub fn train_mse(
    start: &Checkpoint,
    x: &Matrix,
    y: &Matrix,
    steps: usize,
    lr: f64,
) -> Result<Checkpoint> {
    let mut layers: Vec<Layer> = start.layers().to_vec();
    let scale = 2.0 / (y.rows() * y.cols()).max(1) as f64;
    for _ in 0..steps {
        // forward, keeping pre-activations and layer inputs
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut a = x.clone();
        for l in &layers {
            let mut z = l.weight.matmul(&a)?;
            if let Some(b) = &l.bias {
                z.add_column_broadcast(b)?;
            }
            let next = z.map(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let mut grad = a.sub(y)?.scale(scale);
        for li in (0..layers.len()).rev() {
            let act = layers[li].activation;
            let z = &pre[li];
            let mut dz = grad;
            for (g, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *g *= act.derivative(*zv);
            }
            let dw = dz.matmul(&inputs[li].transpose())?;
            if li > 0 {
                grad = layers[li].weight.transpose().matmul(&dz)?;
            } else {
                grad = Matrix::zeros(0, 0);
            }
            let layer = &mut layers[li];
            for (w, g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
                *w -= lr * g;
            }
            if let Some(b) = layer.bias.as_mut() {
                for (r, bv) in b.iter_mut().enumerate() {
                    let g: f64 = dz.row(r).iter().sum();
                    *bv -= lr * g;
                }
            }
        }
    }
    let out = Checkpoint::new(layers, start.dtype())?;
    if out.layers().iter().any(|l| !l.weight.is_finite()) {
        return Err(PmqError::NonFinite("expert training diverged"));
    }
    Ok(out)
}

/// Generates the base model, K experts, and disjoint calibration and held-out
/// sets. Deterministic in `seed`.
pub fn make_synthetic_tasks(seed: u64, spec: &SyntheticSpec) -> Result<SyntheticProblem> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Checkpoint::new(
        random_layers(&mut rng, &spec.dims, spec.activation),
        DType::F64,
    )?;
    let d0 = spec.dims[0];
    let mean_dist = Normal::new(0.0, spec.input_shift.max(0.0)).unwrap();
    let std_dist = Uniform::new(0.5, 1.5);

    let mut experts = Vec::with_capacity(spec.num_tasks);
    let mut calib = Vec::with_capacity(spec.num_tasks);
    let mut heldout = Vec::with_capacity(spec.num_tasks);
    for _ in 0..spec.num_tasks {
        let dist = TaskDistribution {
            mean: (0..d0).map(|_| mean_dist.sample(&mut rng)).collect(),
            std: (0..d0).map(|_| rng.sample(std_dist)).collect(),
        };
        let teacher = Model::from_checkpoint(&perturb(&mut rng, &base, spec.task_shift));
        // each stream gets its own generator so sample counts don't shift each other
        let mut train_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut calib_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut held_rng = ChaCha8Rng::seed_from_u64(rng.gen());

        let expert = match spec.mode {
            ExpertMode::Perturb => teacher.to_checkpoint()?,
            ExpertMode::Train if spec.train_steps == 0 => base.clone(),
            ExpertMode::Train => {
                let x = dist.sample(&mut train_rng, spec.train_samples);
                let y = teacher.forward(&x)?;
                train_mse(&base, &x, &y, spec.train_steps, spec.learning_rate)?
            }
        };
        experts.push(expert);

        let xc = dist.sample(&mut calib_rng, spec.samples_per_task);
        let yc = teacher.forward(&xc)?;
        calib.push(TaskData {
            inputs: xc,
            targets: Some(yc),
        });
        let xh = dist.sample(&mut held_rng, spec.heldout_per_task);
        let yh = teacher.forward(&xh)?;
        heldout.push(TaskData {
            inputs: xh,
            targets: Some(yh),
        });
    }
    Ok(SyntheticProblem {
        base,
        experts,
        calib: CalibSet::new(calib, seed)?,
        heldout: CalibSet::new(heldout, seed)?,
    })
}
