//! Run configuration: one JSON document plus `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use pmq_core::{MergeSpec, QuantConfig, Solver, SyntheticSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "PMQ_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    #[default]
    Bits,
    Alpha,
    Samples,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Bits => "bits",
            Axis::Alpha => "alpha",
            Axis::Samples => "samples",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Axis::Bits => vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            Axis::Alpha => vec![0.0, 0.001, 0.01, 0.1, 1.0, 10.0],
            Axis::Samples => vec![64.0, 128.0, 256.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Points along the axis; the axis default grid when absent.
    pub values: Option<Vec<f64>>,
    pub methods: Vec<Solver>,
    /// Sweep points evaluated concurrently.
    pub jobs: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: Axis::Bits,
            values: None,
            methods: vec![Solver::Rtn, Solver::Gptq, Solver::Epmq],
            jobs: 1,
        }
    }
}

impl SweepSpec {
    pub fn points(&self) -> Vec<f64> {
        self.values
            .clone()
            .unwrap_or_else(|| self.axis.default_values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synthetic: SyntheticSpec,
    pub merge: MergeSpec,
    pub quant: QuantConfig,
    pub out: PathBuf,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synthetic: SyntheticSpec::default(),
            merge: MergeSpec::default(),
            quant: QuantConfig::default(),
            out: PathBuf::from("pmq-out"),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), then applies the seed from
    /// `env_seed` and the `key=value` overrides in order.
    pub fn resolve(
        path: Option<&Path>,
        env_seed: Option<&str>,
        sets: &[String],
    ) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        if let Some(seed) = env_seed {
            let seed: u64 = seed.trim().parse().map_err(|_| {
                CliError::Config(format!(
                    "{SEED_ENV} must be an unsigned integer, got `{seed}`"
                ))
            })?;
            set_path(&mut value, "seed", Value::from(seed))?;
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.merge.validate()?;
        self.quant.validate()?;
        if self.sweep.points().is_empty() {
            return Err(CliError::Config("sweep.values must not be empty".into()));
        }
        if self.sweep.methods.is_empty() {
            return Err(CliError::Config("sweep.methods must not be empty".into()));
        }
        if self.sweep.jobs == 0 {
            return Err(CliError::Config("sweep.jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// JSON when it parses, otherwise a bare string (`solver=gptq`).
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "`{key}`: `{}` is not a section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let sets = [
            "quant.bits=3",
            "quant.solver=gptq",
            "synthetic.dims=[4, 5, 2]",
            "sweep.axis=alpha",
        ]
        .map(String::from);
        let cfg = RunConfig::resolve(None, Some(" 9 "), &sets).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.quant.bits, 3);
        assert_eq!(cfg.quant.solver, Solver::Gptq);
        assert_eq!(cfg.synthetic.dims, vec![4, 5, 2]);
        assert_eq!(cfg.sweep.points(), Axis::Alpha.default_values());
    }

    #[test]
    fn later_overrides_win_and_bad_paths_fail() {
        let sets = ["seed=1", "seed=2"].map(String::from);
        assert_eq!(RunConfig::resolve(None, Some("7"), &sets).unwrap().seed, 2);
        for bad in [
            "seed.x=1",
            "quant.bits=\"four\"",
            "merge.method=blend",
            "=3",
        ] {
            assert!(
                RunConfig::resolve(None, None, &[bad.to_string()]).is_err(),
                "{bad}"
            );
        }
    }
}
