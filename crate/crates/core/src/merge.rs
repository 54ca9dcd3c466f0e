//! Merge operators over expert checkpoints: simple averaging, task arithmetic,
//! and TIES (trim, elect sign, disjoint mean).

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{PmqError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Task-vector scaling for task arithmetic and TIES.
    pub coefficient: f64,
    /// Fraction of largest-magnitude task-vector entries TIES keeps per tensor.
    pub density: f64,
}

impl Default for MergeSpec {
    fn default() -> Self {
        MergeSpec {
            method: MergeMethod::TaskArithmetic,
            coefficient: 0.3,
            density: 0.2,
        }
    }
}

impl MergeSpec {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            MergeMethod::Average => Ok(()),
            MergeMethod::TaskArithmetic | MergeMethod::Ties => {
                // zero is allowed for task arithmetic: it degenerates to the base
                if !(self.coefficient >= 0.0 && self.coefficient.is_finite()) {
                    return Err(PmqError::Config(format!(
                        "merge coefficient must be finite and non-negative, got {}",
                        self.coefficient
                    )));
                }
                if self.method == MergeMethod::Ties && !(self.density > 0.0 && self.density <= 1.0)
                {
                    return Err(PmqError::Config(format!(
                        "TIES density must be in (0, 1], got {}",
                        self.density
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Dispatches on `spec.method`. `base` is ignored by averaging.
pub fn merge(spec: &MergeSpec, base: &Checkpoint, experts: &[Checkpoint]) -> Result<Checkpoint> {
    spec.validate()?;
    match spec.method {
        MergeMethod::Average => merge_average(experts),
        MergeMethod::TaskArithmetic => merge_task_arithmetic(base, experts, spec.coefficient),
        MergeMethod::Ties => merge_ties(base, experts, spec.coefficient, spec.density),
    }
}

fn check_compatible(reference: &Checkpoint, experts: &[Checkpoint]) -> Result<()> {
    if experts.is_empty() {
        return Err(PmqError::Config("at least one expert is required".into()));
    }
    let m = reference.manifest();
    for (i, e) in experts.iter().enumerate() {
        if !e.manifest().same_architecture(&m) {
            return Err(PmqError::Manifest(format!(
                "expert {i} does not share the reference manifest"
            )));
        }
    }
    Ok(())
}

/// Applies `f` entrywise to the per-expert slices of each weight and bias.
fn combine(
    reference: &Checkpoint,
    experts: &[Checkpoint],
    f: impl Fn(&[f64], &[&[f64]]) -> Vec<f64>,
) -> Checkpoint {
    reference.map_tensors(
        |i, l| {
            let parts: Vec<&[f64]> = experts.iter().map(|e| e.layer(i).weight.data()).collect();
            let data = f(l.weight.data(), &parts);
            Matrix::from_vec(l.d_out(), l.d_in(), data).expect("combine preserves length")
        },
        |i, l| {
            l.bias.as_ref().map(|b| {
                let parts: Vec<&[f64]> = experts
                    .iter()
                    .map(|e| {
                        e.layer(i)
                            .bias
                            .as_deref()
                            .expect("manifest guarantees bias")
                    })
                    .collect();
                f(b, &parts)
            })
        },
    )
}

pub fn merge_average(experts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = experts
        .first()
        .ok_or_else(|| PmqError::Config("at least one expert is required".into()))?;
    check_compatible(first, experts)?;
    let k = experts.len() as f64;
    Ok(combine(first, experts, |_, parts| {
        (0..parts[0].len())
            .map(|j| {
                let mut s = 0.0;
                for p in parts {
                    s += p[j];
                }
                s / k
            })
            .collect()
    }))
}

/// `W_m = W_base + λ Σ_i (W_i − W_base)`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    experts: &[Checkpoint],
    coefficient: f64,
) -> Result<Checkpoint> {
    check_compatible(base, experts)?;
    Ok(combine(base, experts, |b, parts| {
        (0..b.len())
            .map(|j| {
                let mut s = 0.0;
                for p in parts {
                    s += p[j] - b[j];
                }
                b[j] + coefficient * s
            })
            .collect()
    }))
}

/// Zeroes all but the `ceil(density · n)` largest-magnitude entries; equal
/// magnitudes keep the lower index.
pub fn trim_top_magnitude(values: &[f64], density: f64) -> Vec<f64> {
    let n = values.len();
    let keep = ((density * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite task vector")
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// TIES merge of one flat tensor given the base entries and the expert entries.
fn ties_tensor(base: &[f64], parts: &[&[f64]], coefficient: f64, density: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = parts
        .iter()
        .map(|p| {
            let tau: Vec<f64> = p.iter().zip(base).map(|(w, b)| w - b).collect();
            trim_top_magnitude(&tau, density)
        })
        .collect();
    (0..base.len())
        .map(|j| {
            let mut total = 0.0;
            for t in &trimmed {
                total += t[j];
            }
            let positive = total >= 0.0;
            let (mut sum, mut count) = (0.0, 0usize);
            for t in &trimmed {
                let v = t[j];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    sum += v;
                    count += 1;
                }
            }
            let merged = if count > 0 { sum / count as f64 } else { 0.0 };
            base[j] + coefficient * merged
        })
        .collect()
}

pub fn merge_ties(
    base: &Checkpoint,
    experts: &[Checkpoint],
    coefficient: f64,
    density: f64,
) -> Result<Checkpoint> {
    check_compatible(base, experts)?;
    if !(density > 0.0 && density <= 1.0) {
        return Err(PmqError::Config(format!(
            "TIES density must be in (0, 1], got {density}"
        )));
    }
    Ok(combine(base, experts, |b, parts| {
        ties_tensor(b, parts, coefficient, density)
    }))
}
