//! Forward-order layer-wise post-merge quantization.
//!
//! Layers are quantized first to last. The calibration inputs of layer `ℓ`
//! come from the model whose layers `0..ℓ` are already quantized, so every
//! layer is calibrated on the activations it will see after deployment.

use serde::{Deserialize, Serialize};

use crate::calib::{collect_layer_stats, CalibSet, LayerCalibStats};
use crate::checkpoint::Checkpoint;
use crate::error::{PmqError, Result};
use crate::matrix::{frobenius_sq, Matrix};
use crate::model::{propagate_through_layer, Model, WeightSource};
use crate::quant::{rtn_quantize, QuantConfig, Solver, Trajectory};
use crate::solver::{epmq_solve, gptq_solve, quadratic_objective, SolveReport, SolverProblem};
use crate::synthetic::mean_squared_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    /// SHA-256 (hex) of the realized weights that produced this layer's
    /// calibration inputs.
    pub trajectory_checksum: String,
    #[serde(flatten)]
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct PmqRun {
    pub merged: Checkpoint,
    pub experts: Vec<Checkpoint>,
    pub cfg: QuantConfig,
    pub reports: Vec<LayerReport>,
    pub model: Model,
}

impl PmqRun {
    pub fn total_objective(&self) -> f64 {
        self.reports.iter().map(|r| r.report.objective).sum()
    }

    pub fn any_damped(&self) -> bool {
        self.reports.iter().any(|r| r.report.damped)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_experts(merged: &Checkpoint, experts: &[Checkpoint], calib: &CalibSet) -> Result<()> {
    if experts.len() != calib.num_tasks() {
        return Err(PmqError::Config(format!(
            "{} experts but {} calibration tasks",
            experts.len(),
            calib.num_tasks()
        )));
    }
    let m = merged.manifest();
    for (i, e) in experts.iter().enumerate() {
        if !e.manifest().same_architecture(&m) {
            return Err(PmqError::Manifest(format!(
                "expert {i} does not share the merged manifest"
            )));
        }
    }
    Ok(())
}

/// Shared layer loop. `solve(idx, stats)` quantizes layer `idx`; `stats` is
/// `None` only when `calib` is absent.
fn run_layerwise(
    merged: &Checkpoint,
    calib: Option<&CalibSet>,
    cfg: &QuantConfig,
    mut solve: impl FnMut(usize, Option<&LayerCalibStats>) -> Result<SolveReport>,
) -> Result<(Model, Vec<LayerReport>)> {
    let mut model = Model::from_checkpoint(merged);
    let frozen = model.clone();
    let mut cache: Option<Vec<Matrix>> = None;
    let mut reports = Vec::with_capacity(model.num_layers());
    for idx in 0..model.num_layers() {
        let id = model.layer(idx).id.clone();
        let trajectory = match cfg.trajectory {
            Trajectory::Quantized => &model,
            Trajectory::FullPrecision => &frozen,
        };
        let checksum = trajectory.prefix_checksum(idx);
        let collected = match calib {
            Some(c) => {
                let cached = if cfg.recompute_trajectory {
                    None
                } else {
                    cache.as_deref()
                };
                Some(collect_layer_stats(trajectory, c, idx, cached).map_err(|e| e.in_layer(&id))?)
            }
            None => None,
        };
        let report = solve(idx, collected.as_ref().map(|(s, _)| s)).map_err(|e| e.in_layer(&id))?;

        let trajectory = match cfg.trajectory {
            Trajectory::Quantized => &model,
            Trajectory::FullPrecision => &frozen,
        };
        if trajectory.prefix_checksum(idx) != checksum {
            return Err(PmqError::TrajectoryDrift(id));
        }
        model
            .replace_weight(idx, WeightSource::quantized(report.layer().clone()))
            .map_err(|e| e.in_layer(&id))?;

        if let Some((_, acts)) = collected {
            let next_layer = match cfg.trajectory {
                Trajectory::Quantized => model.layer(idx),
                Trajectory::FullPrecision => frozen.layer(idx),
            };
            cache = Some(
                acts.iter()
                    .map(|x| propagate_through_layer(x, next_layer))
                    .collect::<Result<_>>()?,
            );
        }
        reports.push(LayerReport {
            layer: id,
            trajectory_checksum: hex(&checksum),
            report,
        });
    }
    Ok((model, reports))
}

/// Expert-guided anchored quantization of every layer of `merged`.
pub fn run_epmq(
    merged: &Checkpoint,
    experts: &[Checkpoint],
    calib: &CalibSet,
    cfg: &QuantConfig,
) -> Result<PmqRun> {
    cfg.validate()?;
    if cfg.solver != Solver::Epmq {
        return Err(PmqError::Config(format!(
            "run_epmq needs solver epmq, got {}",
            cfg.solver.name()
        )));
    }
    check_experts(merged, experts, calib)?;
    let (model, reports) = run_layerwise(merged, Some(calib), cfg, |idx, stats| {
        let stats = stats.expect("calibration present");
        let ws: Vec<&Matrix> = experts.iter().map(|e| &e.layer(idx).weight).collect();
        epmq_solve(&ws, &merged.layer(idx).weight, stats, cfg)
    })?;
    Ok(PmqRun {
        merged: merged.clone(),
        experts: experts.to_vec(),
        cfg: cfg.clone(),
        reports,
        model,
    })
}

/// Naive post-merge quantization: RTN or GPTQ on the merged weights with
/// merged-model targets and the pooled Hessian `Σ_i H_i`. RTN never looks at
/// `calib`; when present it is only used to report the objective.
pub fn run_naive_ptq(
    merged: &Checkpoint,
    experts: &[Checkpoint],
    calib: Option<&CalibSet>,
    cfg: &QuantConfig,
) -> Result<PmqRun> {
    cfg.validate()?;
    match cfg.solver {
        Solver::Rtn => {}
        Solver::Gptq if calib.is_some() => {}
        Solver::Gptq => return Err(PmqError::Config("gptq needs calibration data".into())),
        Solver::Epmq => return Err(PmqError::Config("run_naive_ptq takes rtn or gptq".into())),
    }
    let (model, reports) = run_layerwise(merged, calib, cfg, |idx, stats| {
        let w = &merged.layer(idx).weight;
        match cfg.solver {
            Solver::Gptq => {
                let h = stats.expect("calibration present").pooled_hessian();
                gptq_solve(&SolverProblem {
                    target: w.clone(),
                    curvature: h,
                    grid_source: w.clone(),
                    cfg: cfg.clone(),
                })
            }
            _ => {
                let q = rtn_quantize(w, cfg)?;
                let objective = match stats {
                    Some(s) => quadratic_objective(&q.dequantize(), w, &s.pooled_hessian())?,
                    None => f64::NAN,
                };
                Ok(SolveReport {
                    quantized: Some(q),
                    objective,
                    lambda: 0.0,
                    damping: 0.0,
                    continuous_damping: 0.0,
                    damped: false,
                    per_column_comp_norms: Vec::new(),
                    bits: cfg.bits,
                    group_size: cfg.group_size,
                    solver: Solver::Rtn,
                })
            }
        }
    })?;
    Ok(PmqRun {
        merged: merged.clone(),
        experts: experts.to_vec(),
        cfg: cfg.clone(),
        reports,
        model,
    })
}

/// Runs whichever pipeline `cfg.solver` selects.
pub fn run(
    merged: &Checkpoint,
    experts: &[Checkpoint],
    calib: Option<&CalibSet>,
    cfg: &QuantConfig,
) -> Result<PmqRun> {
    match cfg.solver {
        Solver::Epmq => {
            let calib =
                calib.ok_or_else(|| PmqError::Config("epmq needs calibration data".into()))?;
            run_epmq(merged, experts, calib, cfg)
        }
        _ => run_naive_ptq(merged, experts, calib, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEntry {
    pub layer: String,
    pub task: usize,
    /// `‖Q X − W_m X‖_F`
    pub quant: f64,
    /// `‖W_m X − W_i X‖_F`
    pub merge: f64,
    /// `‖Q X − W_i X‖_F`
    pub combined: f64,
    /// max |(Q X − W_i X) − (Δ_quant + Δ_merge)| over entries.
    pub identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub entries: Vec<DeviationEntry>,
    pub max_identity_residual: f64,
    pub identity_holds: bool,
}

/// Absolute tolerance for the decomposition identity on unit-scale data.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Splits the held-out output deviation of every quantized layer into its
/// quantization and expert-relative merging parts (biases excluded), on
/// activations of the quantized trajectory.
pub fn deviation_diagnostics(run: &PmqRun, heldout: &CalibSet) -> Result<DeviationReport> {
    if run.experts.len() != heldout.num_tasks() {
        return Err(PmqError::Config("held-out tasks must match experts".into()));
    }
    let mut entries = Vec::new();
    let mut worst: f64 = 0.0;
    let mut holds = true;
    for (task, (t, expert)) in heldout.tasks().iter().zip(&run.experts).enumerate() {
        let mut x = t.inputs.clone();
        for idx in 0..run.model.num_layers() {
            let layer = run.model.layer(idx);
            let qx = layer.weight.realized().matmul(&x)?;
            let mx = run.merged.layer(idx).weight.matmul(&x)?;
            let ex = expert.layer(idx).weight.matmul(&x)?;
            let dq = qx.sub(&mx)?;
            let dm = mx.sub(&ex)?;
            let comb = qx.sub(&ex)?;
            let sum = dq.add(&dm)?;
            let mut resid: f64 = 0.0;
            for (a, b) in comb.data().iter().zip(sum.data()) {
                resid = resid.max((a - b).abs());
            }
            let scale = 1.0f64.max(qx.max_abs()).max(mx.max_abs()).max(ex.max_abs());
            if resid > IDENTITY_TOL * scale {
                holds = false;
            }
            worst = worst.max(resid);
            entries.push(DeviationEntry {
                layer: layer.id.clone(),
                task,
                quant: frobenius_sq(&dq).sqrt(),
                merge: frobenius_sq(&dm).sqrt(),
                combined: frobenius_sq(&comb).sqrt(),
                identity_residual: resid,
            });
            x = propagate_through_layer(&x, layer)?;
        }
    }
    Ok(DeviationReport {
        entries,
        max_identity_residual: worst,
        identity_holds: holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task_mse: Vec<f64>,
    pub macro_mse: f64,
}

/// Per-task mean squared error against the task targets, and its mean.
pub fn evaluate(model: &Model, heldout: &CalibSet) -> Result<EvalReport> {
    let per_task_mse = heldout
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let y = t.targets.as_ref().ok_or_else(|| {
                PmqError::Config(format!("held-out task {} has no targets", i + 1))
            })?;
            mean_squared_error(&model.forward(&t.inputs)?, y)
        })
        .collect::<Result<Vec<_>>>()?;
    let macro_mse = per_task_mse.iter().sum::<f64>() / per_task_mse.len().max(1) as f64;
    Ok(EvalReport {
        per_task_mse,
        macro_mse,
    })
}

/// Serializable summary of a run, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub config: QuantConfig,
    pub layers: Vec<LayerReport>,
    #[serde(with = "crate::solver::nan_as_null")]
    pub total_objective: f64,
    pub damped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<DeviationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationSummary {
    pub max_identity_residual: f64,
    pub identity_holds: bool,
    pub mean_quant: f64,
    pub mean_merge: f64,
    pub mean_combined: f64,
}

impl DeviationReport {
    pub fn summary(&self) -> DeviationSummary {
        let n = self.entries.len().max(1) as f64;
        DeviationSummary {
            max_identity_residual: self.max_identity_residual,
            identity_holds: self.identity_holds,
            mean_quant: self.entries.iter().map(|e| e.quant).sum::<f64>() / n,
            mean_merge: self.entries.iter().map(|e| e.merge).sum::<f64>() / n,
            mean_combined: self.entries.iter().map(|e| e.combined).sum::<f64>() / n,
        }
    }
}

impl PmqRun {
    pub fn summary(&self, deviation: Option<&DeviationReport>) -> RunSummary {
        RunSummary {
            config: self.cfg.clone(),
            layers: self.reports.clone(),
            total_objective: self.total_objective(),
            damped: self.any_damped(),
            deviation: deviation.map(DeviationReport::summary),
        }
    }
}
