//! The five subcommands. Every command reads and writes under one output
//! directory:
//!
//! ```text
//! base.safetensors            experts/expert<i>.safetensors
//! calib/                      heldout/
//! merged.safetensors          quantized.safetensors
//! run.json                    metrics.csv
//! deviation.json              sweep_<axis>.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pmq_core::checkpoint::write_json;
use pmq_core::pipeline::RunSummary;
use pmq_core::{
    deviation_diagnostics, evaluate, load_checkpoint, load_model, make_synthetic_tasks, merge, run,
    save_checkpoint, save_model, CalibSet, Checkpoint, Model, PmqError, PmqRun, QuantConfig,
    Solver,
};
use serde::Serialize;

use crate::config::{Axis, RunConfig};
use crate::error::{CliError, Result};

pub const METRICS_HEADER: [&str; 6] = ["task", "method", "bits", "alpha", "samples", "mse"];

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base.safetensors")
    }

    pub fn expert(&self, i: usize) -> PathBuf {
        self.root
            .join("experts")
            .join(format!("expert{}.safetensors", i + 1))
    }

    pub fn calib(&self) -> PathBuf {
        self.root.join("calib")
    }

    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout")
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.safetensors")
    }

    pub fn quantized(&self) -> PathBuf {
        self.root.join("quantized.safetensors")
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn deviation(&self) -> PathBuf {
        self.root.join("deviation.json")
    }

    pub fn sweep(&self, axis: Axis) -> PathBuf {
        self.root.join(format!("sweep_{}.csv", axis.name()))
    }
}

fn input<T>(path: &Path, r: pmq_core::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Input {
        path: path.display().to_string(),
        source,
    })
}

fn load_experts(layout: &Layout) -> Result<Vec<Checkpoint>> {
    let mut experts = Vec::new();
    while layout.expert(experts.len()).exists() {
        let p = layout.expert(experts.len());
        experts.push(input(&p, load_checkpoint(&p))?);
    }
    if experts.is_empty() {
        let p = layout.expert(0);
        return Err(CliError::Input {
            path: p.display().to_string(),
            source: PmqError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no expert checkpoints",
            )),
        });
    }
    Ok(experts)
}

fn load_calib(dir: &Path) -> Result<CalibSet> {
    input(dir, CalibSet::load(dir))
}

/// The first `n` samples of every task; asking for more than were generated
/// is a configuration error.
fn calib_budget(calib: &CalibSet, n: usize) -> Result<CalibSet> {
    if n > calib.samples_per_task() {
        return Err(CliError::Config(format!(
            "samples_per_task {n} exceeds the {} calibration samples on disk",
            calib.samples_per_task()
        )));
    }
    Ok(calib.truncated(n)?)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let p = make_synthetic_tasks(cfg.seed, &cfg.synthetic)?;
    let experts_dir = layout.root().join("experts");
    if experts_dir.exists() {
        fs::remove_dir_all(&experts_dir)?;
    }
    fs::create_dir_all(&experts_dir)?;
    save_checkpoint(&p.base, &layout.base())?;
    for (i, e) in p.experts.iter().enumerate() {
        save_checkpoint(e, &layout.expert(i))?;
    }
    for dir in [layout.calib(), layout.heldout()] {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
    }
    p.calib.save(&layout.calib())?;
    p.heldout.save(&layout.heldout())?;
    Ok(())
}

pub fn cmd_merge(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let base = input(&layout.base(), load_checkpoint(&layout.base()))?;
    let experts = load_experts(&layout)?;
    let merged = merge(&cfg.merge, &base, &experts)?;
    save_checkpoint(&merged, &layout.merged())?;
    Ok(())
}

/// Runs the configured solver. RTN never reads the calibration directory.
fn quantize_with(
    quant: &QuantConfig,
    merged: &Checkpoint,
    experts: &[Checkpoint],
    calib: Option<&CalibSet>,
) -> Result<PmqRun> {
    let budget = match (quant.solver, calib) {
        (Solver::Rtn, _) | (_, None) => None,
        (_, Some(c)) => Some(calib_budget(c, quant.samples_per_task)?),
    };
    Ok(run(merged, experts, budget.as_ref(), quant)?)
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let merged = input(&layout.merged(), load_checkpoint(&layout.merged()))?;
    let experts = load_experts(&layout)?;
    let calib = match cfg.quant.solver {
        Solver::Rtn => None,
        _ => Some(load_calib(&layout.calib())?),
    };
    let result = quantize_with(&cfg.quant, &merged, &experts, calib.as_ref())?;
    let deviation = if layout.heldout().exists() {
        let heldout = load_calib(&layout.heldout())?;
        Some(deviation_diagnostics(&result, &heldout)?)
    } else {
        None
    };
    save_model(&result.model, &layout.quantized())?;
    write_json(&layout.run_json(), &result.summary(deviation.as_ref()))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricRow {
    task: String,
    method: String,
    bits: Option<u8>,
    alpha: Option<f64>,
    samples: Option<usize>,
    mse: f64,
}

fn metric_rows(
    model: &Model,
    heldout: &CalibSet,
    method: &str,
    quant: Option<&QuantConfig>,
) -> Result<Vec<MetricRow>> {
    let report = evaluate(model, heldout)?;
    let solver = quant.map(|q| q.solver);
    let row = |task: String, mse: f64| MetricRow {
        task,
        method: method.to_string(),
        bits: quant.map(|q| q.bits),
        alpha: quant
            .filter(|_| solver == Some(Solver::Epmq))
            .map(|q| q.alpha),
        samples: quant
            .filter(|_| solver != Some(Solver::Rtn))
            .map(|q| q.samples_per_task),
        mse,
    };
    let mut rows: Vec<MetricRow> = report
        .per_task_mse
        .iter()
        .enumerate()
        .map(|(i, &m)| row(format!("task{}", i + 1), m))
        .collect();
    rows.push(row("macro".into(), report.macro_mse));
    Ok(rows)
}

/// Held-out MSE of the full-precision merged model (method `merged`) and of
/// the quantized model, plus the deviation decomposition.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let merged = input(&layout.merged(), load_checkpoint(&layout.merged()))?;
    let experts = load_experts(&layout)?;
    let heldout = load_calib(&layout.heldout())?;
    let model = input(&layout.quantized(), load_model(&layout.quantized()))?;
    let text = fs::read_to_string(layout.run_json())?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: layout.run_json().display().to_string(),
        source: PmqError::Json(e),
    })?;

    let mut rows = metric_rows(&Model::from_checkpoint(&merged), &heldout, "merged", None)?;
    rows.extend(metric_rows(
        &model,
        &heldout,
        summary.config.solver.name(),
        Some(&summary.config),
    )?);
    let mut w = csv::Writer::from_path(layout.metrics())?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let run = PmqRun {
        merged,
        experts,
        cfg: summary.config,
        reports: summary.layers,
        model,
    };
    write_json(&layout.deviation(), &deviation_diagnostics(&run, &heldout)?)?;
    Ok(())
}

/// One sweep point. `per_task_mse` is empty when `error` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub method: Solver,
    pub per_task_mse: Vec<f64>,
    pub macro_mse: Option<f64>,
    pub wall_time: f64,
    pub damped: Option<bool>,
    pub error: Option<String>,
}

pub fn sweep_header(k: usize) -> Vec<String> {
    let mut h = vec!["axis_value".to_string(), "method".to_string()];
    h.extend((1..=k).map(|i| format!("mse_task{i}")));
    h.extend(["macro_mse", "wall_time", "damped", "error"].map(String::from));
    h
}

fn point_config(base: &QuantConfig, axis: Axis, value: f64, method: Solver) -> Result<QuantConfig> {
    let mut q = base.clone();
    q.solver = method;
    let as_count = |what: &str| -> Result<usize> {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(CliError::Config(format!(
                "{what} axis value {value} is not a positive integer"
            )))
        }
    };
    match axis {
        Axis::Bits => q.bits = u8::try_from(as_count("bits")?).unwrap_or(u8::MAX),
        Axis::Alpha => q.alpha = value,
        Axis::Samples => q.samples_per_task = as_count("samples")?,
    }
    q.validate()?;
    Ok(q)
}

struct SweepInputs {
    merged: Checkpoint,
    experts: Vec<Checkpoint>,
    calib: CalibSet,
    heldout: CalibSet,
}

fn sweep_point(inp: &SweepInputs, cfg: &RunConfig, value: f64, method: Solver) -> SweepRow {
    let mut row = SweepRow {
        axis_value: value,
        method,
        per_task_mse: Vec::new(),
        macro_mse: None,
        wall_time: 0.0,
        damped: None,
        error: None,
    };
    let outcome = point_config(&cfg.quant, cfg.sweep.axis, value, method).and_then(|q| {
        let start = Instant::now();
        let r = quantize_with(&q, &inp.merged, &inp.experts, Some(&inp.calib));
        row.wall_time = start.elapsed().as_secs_f64();
        let r = r?;
        Ok((evaluate(&r.model, &inp.heldout)?, r.any_damped()))
    });
    match outcome {
        Ok((eval, damped)) => {
            row.per_task_mse = eval.per_task_mse;
            row.macro_mse = Some(eval.macro_mse);
            row.damped = Some(damped);
        }
        Err(e) => row.error = Some(format!("{}: {e}", e.kind())),
    }
    row
}

/// Grid over one axis with everything else fixed; one row per (point,
/// method). Failed points become rows with an error tag. Merging happens in
/// memory from the generated base and experts.
pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let layout = Layout::new(&cfg.out);
    let base = input(&layout.base(), load_checkpoint(&layout.base()))?;
    let experts = load_experts(&layout)?;
    let inp = SweepInputs {
        merged: merge(&cfg.merge, &base, &experts)?,
        experts,
        calib: load_calib(&layout.calib())?,
        heldout: load_calib(&layout.heldout())?,
    };
    let work: Vec<(f64, Solver)> = cfg
        .sweep
        .points()
        .into_iter()
        .flat_map(|v| cfg.sweep.methods.iter().map(move |&m| (v, m)))
        .collect();
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; work.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..cfg.sweep.jobs.min(work.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, m)) = work.get(i) else { break };
                let row = sweep_point(&inp, cfg, v, m);
                slots.lock().expect("sweep slot lock")[i] = Some(row);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("sweep slot lock")
        .into_iter()
        .map(|r| r.expect("every point produces a row"))
        .collect())
}

fn fmt_axis(axis: Axis, v: f64) -> String {
    match axis {
        Axis::Alpha => v.to_string(),
        _ => format!("{}", v as i64),
    }
}

pub fn write_sweep_csv(path: &Path, axis: Axis, k: usize, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(sweep_header(k))?;
    for r in rows {
        let mut rec = vec![fmt_axis(axis, r.axis_value), r.method.name().to_string()];
        if r.per_task_mse.len() == k {
            rec.extend(r.per_task_mse.iter().map(f64::to_string));
        } else {
            rec.extend(std::iter::repeat_n(String::new(), k));
        }
        rec.push(r.macro_mse.map(|m| m.to_string()).unwrap_or_default());
        rec.push(format!("{:.6}", r.wall_time));
        rec.push(r.damped.map(|d| d.to_string()).unwrap_or_default());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let rows = sweep_rows(cfg)?;
    let layout = Layout::new(&cfg.out);
    let k = load_experts(&layout)?.len();
    let path = layout.sweep(cfg.sweep.axis);
    write_sweep_csv(&path, cfg.sweep.axis, k, &rows)?;
    Ok(path)
}
