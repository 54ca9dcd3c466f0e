//! Per-task calibration sets and layer-wise statistics.
//!
//! Hessians are unnormalized sums `X Xᵀ` over calibration columns, and the
//! energies `‖X‖²_F` are likewise unnormalized, so the adaptive anchor scales
//! consistently with the curvature.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    read_tensor_file, take_tensor, write_json, write_tensor_file, DType, RawTensor,
};
use crate::error::{PmqError, Result};
use crate::matrix::{frobenius_sq, Matrix};
use crate::model::Model;

/// Columns per forward chunk during statistics collection.
pub const CALIB_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// `d_in⁰ × n`, one sample per column.
    pub inputs: Matrix,
    /// `d_out^L × n` task targets, when the set is used for evaluation.
    pub targets: Option<Matrix>,
}

impl TaskData {
    pub fn num_samples(&self) -> usize {
        self.inputs.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    tasks: Vec<TaskData>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibIndex {
    #[serde(rename = "K")]
    pub k: usize,
    pub samples_per_task: usize,
    pub seed: u64,
}

impl CalibSet {
    pub fn new(tasks: Vec<TaskData>, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(PmqError::Config(
                "calibration set needs at least one task".into(),
            ));
        }
        let d = tasks[0].inputs.rows();
        for (i, t) in tasks.iter().enumerate() {
            if t.num_samples() == 0 {
                return Err(PmqError::Config(format!("task {i} has no samples")));
            }
            if t.inputs.rows() != d {
                return Err(PmqError::shape("CalibSet task inputs", d, t.inputs.rows()));
            }
            if let Some(y) = &t.targets {
                if y.cols() != t.num_samples() {
                    return Err(PmqError::shape(
                        "CalibSet targets",
                        t.num_samples(),
                        y.cols(),
                    ));
                }
            }
        }
        Ok(CalibSet { tasks, seed })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples_per_task(&self) -> usize {
        self.tasks
            .iter()
            .map(TaskData::num_samples)
            .min()
            .unwrap_or(0)
    }

    /// Keeps the first `n` samples of every task.
    pub fn truncated(&self, n: usize) -> Result<CalibSet> {
        if n == 0 {
            return Err(PmqError::Config("samples_per_task must be positive".into()));
        }
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let m = n.min(t.num_samples());
                TaskData {
                    inputs: t.inputs.columns(0, m),
                    targets: t.targets.as_ref().map(|y| y.columns(0, m)),
                }
            })
            .collect();
        CalibSet::new(tasks, self.seed)
    }

    pub fn index(&self) -> CalibIndex {
        CalibIndex {
            k: self.tasks.len(),
            samples_per_task: self.samples_per_task(),
            seed: self.seed,
        }
    }

    /// Writes `task<i>.safetensors` (1-based) plus `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, t) in self.tasks.iter().enumerate() {
            let mut tensors = BTreeMap::new();
            tensors.insert(
                "inputs".to_string(),
                RawTensor::matrix(&t.inputs, DType::F64),
            );
            if let Some(y) = &t.targets {
                tensors.insert("targets".to_string(), RawTensor::matrix(y, DType::F64));
            }
            write_tensor_file(
                &dir.join(format!("task{}.safetensors", i + 1)),
                &tensors,
                None,
            )?;
        }
        write_json(&dir.join("index.json"), &self.index())
    }

    pub fn load(dir: &Path) -> Result<CalibSet> {
        let text = fs::read_to_string(dir.join("index.json"))?;
        let index: CalibIndex =
            serde_json::from_str(&text).map_err(|e| PmqError::Manifest(e.to_string()))?;
        let mut tasks = Vec::with_capacity(index.k);
        for i in 0..index.k {
            let (tensors, _) = read_tensor_file(&dir.join(format!("task{}.safetensors", i + 1)))?;
            let inputs = take_tensor(&tensors, "inputs")?.to_matrix("inputs", DType::F64)?;
            let targets = match tensors.get("targets") {
                Some(t) => Some(t.to_matrix("targets", DType::F64)?),
                None => None,
            };
            tasks.push(TaskData { inputs, targets });
        }
        CalibSet::new(tasks, index.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibStats {
    /// Per-task `H_i = X_i X_iᵀ`, `d × d`.
    pub hessians: Vec<Matrix>,
    /// Per-task `‖X_i‖²_F`.
    pub energies: Vec<f64>,
    /// Per-task number of calibration columns.
    pub counts: Vec<usize>,
    pub dim: usize,
}

impl LayerCalibStats {
    pub fn from_activations(acts: &[Matrix], chunk: usize) -> Result<Self> {
        let dim = acts
            .first()
            .map(Matrix::rows)
            .ok_or_else(|| PmqError::Config("statistics need at least one task".into()))?;
        let chunk = chunk.max(1);
        let mut hessians = Vec::with_capacity(acts.len());
        let mut energies = Vec::with_capacity(acts.len());
        let mut counts = Vec::with_capacity(acts.len());
        for x in acts {
            if x.rows() != dim {
                return Err(PmqError::shape("layer statistics", dim, x.rows()));
            }
            let mut h = Matrix::zeros(dim, dim);
            let mut start = 0;
            while start < x.cols() {
                let end = (start + chunk).min(x.cols());
                h.add_assign(&x.columns(start, end).gram())?;
                start = end;
            }
            hessians.push(h);
            energies.push(frobenius_sq(x));
            counts.push(x.cols());
        }
        Ok(LayerCalibStats {
            hessians,
            energies,
            counts,
            dim,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.hessians.len()
    }

    /// `Σ_i H_i`, summed in task order.
    pub fn pooled_hessian(&self) -> Matrix {
        let mut h = Matrix::zeros(self.dim, self.dim);
        for hi in &self.hessians {
            h.add_assign(hi).expect("hessians share a dimension");
        }
        h
    }

    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }
}

/// Activation-adaptive anchor `λ = (α / d) · Σ_i ‖X_i‖²_F`.
pub fn anchor_lambda(stats: &LayerCalibStats, alpha: f64) -> f64 {
    alpha / stats.dim as f64 * stats.total_energy()
}

/// Layer-`idx` inputs for every task under the current `model`, and their
/// statistics. With `cached`, the supplied activations are used as the layer
/// inputs after a shape check instead of re-running the model prefix.
pub fn collect_layer_stats(
    model: &Model,
    calib: &CalibSet,
    idx: usize,
    cached: Option<&[Matrix]>,
) -> Result<(LayerCalibStats, Vec<Matrix>)> {
    collect_layer_stats_chunked(model, calib, idx, cached, CALIB_CHUNK)
}

pub fn collect_layer_stats_chunked(
    model: &Model,
    calib: &CalibSet,
    idx: usize,
    cached: Option<&[Matrix]>,
    chunk: usize,
) -> Result<(LayerCalibStats, Vec<Matrix>)> {
    if idx >= model.num_layers() {
        return Err(PmqError::OutOfRange {
            index: idx,
            len: model.num_layers(),
        });
    }
    let d = model.layer(idx).d_in();
    let acts: Vec<Matrix> = match cached {
        Some(c) => {
            if c.len() != calib.num_tasks() {
                return Err(PmqError::shape(
                    "activation cache tasks",
                    calib.num_tasks(),
                    c.len(),
                ));
            }
            for (x, t) in c.iter().zip(calib.tasks()) {
                if x.rows() != d || x.cols() != t.num_samples() {
                    return Err(PmqError::shape(
                        "activation cache",
                        format!("{d}x{}", t.num_samples()),
                        format!("{}x{}", x.rows(), x.cols()),
                    ));
                }
            }
            c.to_vec()
        }
        None => calib
            .tasks()
            .iter()
            .map(|t| forward_chunked(model, &t.inputs, idx, chunk))
            .collect::<Result<_>>()?,
    };
    let stats = LayerCalibStats::from_activations(&acts, chunk)?;
    Ok((stats, acts))
}

fn forward_chunked(model: &Model, x: &Matrix, idx: usize, chunk: usize) -> Result<Matrix> {
    let chunk = chunk.max(1);
    let mut out: Option<Matrix> = None;
    let mut start = 0;
    while start < x.cols() {
        let end = (start + chunk).min(x.cols());
        let part = model.forward_to_layer(&x.columns(start, end), idx)?;
        out = Some(match out {
            None => part,
            Some(acc) => acc.hcat(&part)?,
        });
        start = end;
    }
    Ok(out.expect("at least one sample"))
}
