//! Layer solvers.
//!
//! The expert-guided objective for one layer is
//!
//! ```text
//! f(Q) = Σ_i ‖Q X_i − W_i X_i‖²_F + λ ‖Q − W_m‖²_F
//!      = Σ_i tr((Q − W_i) H_i (Q − W_i)ᵀ) + λ ‖Q − W_m‖²_F
//! ```
//!
//! With `H_E = Σ_i H_i + λI` and `R = Σ_i W_i H_i + λ W_m`, completing the
//! square gives `f(Q) = tr((Q − W*) H_E (Q − W*)ᵀ) + c` where `W* = R H_E⁻¹`
//! and `c = f(W*)`. So E-PMQ is GPTQ rounding toward `W*` under curvature
//! `H_E`, which is how [`epmq_solve`] is built.

use serde::{Deserialize, Serialize};

use crate::calib::{anchor_lambda, LayerCalibStats};
use crate::error::{PmqError, Result};
use crate::matrix::{frobenius_sq, Cholesky, Matrix};
use crate::quant::{max_code, GridSource, GroupGrids, QuantConfig, QuantizedLayer, Solver};

/// Upper bound on per-row assignments [`brute_force_optimum`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Clone)]
pub struct SolverProblem {
    /// Weight the rounding aims at, `d_out × d`.
    pub target: Matrix,
    /// Curvature before damping, `d × d`.
    pub curvature: Matrix,
    /// Weight the per-group grids are fitted on.
    pub grid_source: Matrix,
    pub cfg: QuantConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub quantized: Option<QuantizedLayer>,
    /// NaN (written as `null`) when no calibration data was available.
    #[serde(with = "nan_as_null")]
    pub objective: f64,
    pub lambda: f64,
    /// Diagonal loading added to the curvature before the GPTQ factorization.
    pub damping: f64,
    /// Diagonal loading the continuous solve needed (0 unless `H_E` was singular).
    pub continuous_damping: f64,
    pub damped: bool,
    pub per_column_comp_norms: Vec<f64>,
    pub bits: u8,
    pub group_size: usize,
    pub solver: Solver,
}

pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl SolveReport {
    pub fn layer(&self) -> &QuantizedLayer {
        self.quantized
            .as_ref()
            .expect("report carries its quantized layer")
    }
}

/// Effective curvature, right-hand side, and anchor strength.
#[derive(Debug, Clone)]
pub struct EpmqStatistics {
    pub curvature: Matrix,
    pub rhs: Matrix,
    pub lambda: f64,
}

pub fn build_epmq_statistics(
    experts: &[&Matrix],
    merged: &Matrix,
    stats: &LayerCalibStats,
    alpha: f64,
) -> Result<EpmqStatistics> {
    if experts.len() != stats.num_tasks() {
        return Err(PmqError::shape(
            "expert count",
            stats.num_tasks(),
            experts.len(),
        ));
    }
    let d = stats.dim;
    if merged.cols() != d {
        return Err(PmqError::shape("merged weight cols", d, merged.cols()));
    }
    for w in experts {
        if w.shape() != merged.shape() {
            return Err(PmqError::shape(
                "expert weight",
                format!("{:?}", merged.shape()),
                format!("{:?}", w.shape()),
            ));
        }
    }
    let lambda = anchor_lambda(stats, alpha);
    let curvature = stats.pooled_hessian().add_diag(lambda);
    let mut rhs = merged.scale(lambda);
    for (w, h) in experts.iter().zip(&stats.hessians) {
        rhs.add_assign(&w.matmul(h)?)?;
    }
    Ok(EpmqStatistics {
        curvature,
        rhs,
        lambda,
    })
}

/// `R · H_E⁻¹`, the minimizer of the unconstrained objective.
pub fn continuous_solution(curvature: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    Cholesky::factor(curvature)?.solve_right(rhs)
}

fn mean_diag(h: &Matrix) -> f64 {
    let d = h.diag();
    d.iter().sum::<f64>() / d.len().max(1) as f64
}

/// [`continuous_solution`], falling back to `percdamp · mean(diag)` loading
/// when the curvature is singular. Returns the solution and the loading used.
pub fn continuous_solution_damped(
    curvature: &Matrix,
    rhs: &Matrix,
    percdamp: f64,
) -> Result<(Matrix, f64)> {
    match continuous_solution(curvature, rhs) {
        Ok(w) => Ok((w, 0.0)),
        Err(PmqError::Singular { .. }) => {
            let mut damp = percdamp * mean_diag(curvature);
            if !(damp > 0.0) {
                damp = percdamp;
            }
            let w = continuous_solution(&curvature.add_diag(damp), rhs).map_err(|e| match e {
                PmqError::Singular { pivot } => PmqError::DampedSingular { pivot },
                other => other,
            })?;
            Ok((w, damp))
        }
        Err(e) => Err(e),
    }
}

/// `tr((Q − T) H (Q − T)ᵀ)`.
pub fn quadratic_objective(q: &Matrix, target: &Matrix, h: &Matrix) -> Result<f64> {
    let diff = q.sub(target)?;
    let dh = diff.matmul(h)?;
    let mut s = 0.0;
    for (a, b) in dh.data().iter().zip(diff.data()) {
        s += a * b;
    }
    Ok(s)
}

/// The expert-guided objective evaluated through the per-task Hessians.
pub fn epmq_objective(
    q: &Matrix,
    experts: &[&Matrix],
    merged: &Matrix,
    stats: &LayerCalibStats,
    lambda: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (w, h) in experts.iter().zip(&stats.hessians) {
        total += quadratic_objective(q, w, h)?;
    }
    Ok(total + lambda * frobenius_sq(&q.sub(merged)?))
}

/// Sequential column rounding with inverse-Hessian error compensation.
///
/// Grids are fitted once per group from `problem.grid_source`. Columns are
/// processed in natural order (or by descending curvature diagonal with
/// `act_order`); the rounding error of each column is spread onto the later
/// ones through the upper Cholesky factor of the damped inverse Hessian.
pub fn gptq_solve(problem: &SolverProblem) -> Result<SolveReport> {
    let cfg = &problem.cfg;
    let d = problem.curvature.rows();
    if problem.curvature.cols() != d || problem.target.cols() != d {
        return Err(PmqError::shape(
            "gptq_solve",
            format!("target cols = curvature dim {d}"),
            format!(
                "{:?} / {:?}",
                problem.target.shape(),
                problem.curvature.shape()
            ),
        ));
    }
    if problem.grid_source.shape() != problem.target.shape() {
        return Err(PmqError::shape(
            "gptq grid source",
            format!("{:?}", problem.target.shape()),
            format!("{:?}", problem.grid_source.shape()),
        ));
    }
    if !(cfg.percdamp > 0.0) {
        return Err(PmqError::Config("gptq_solve needs percdamp > 0".into()));
    }
    if !problem.target.is_finite() || !problem.curvature.is_finite() {
        return Err(PmqError::NonFinite("gptq_solve inputs"));
    }

    let mut h = problem.curvature.clone();
    // columns that never activate get unit curvature
    for j in 0..d {
        if h.get(j, j) == 0.0 {
            h.set(j, j, 1.0);
        }
    }
    let damping = cfg.percdamp * mean_diag(&h);
    let mut perm: Vec<usize> = (0..d).collect();
    if cfg.act_order {
        perm.sort_by(|&a, &b| h.get(b, b).total_cmp(&h.get(a, a)).then(a.cmp(&b)));
    }
    let h = Matrix::from_fn(d, d, |a, b| h.get(perm[a], perm[b])).add_diag(damping);
    let factor = |m: &Matrix| {
        Cholesky::factor(m).map_err(|e| match e {
            PmqError::Singular { pivot } => PmqError::DampedSingular { pivot },
            other => other,
        })
    };
    let hinv = factor(&h)?.inverse();
    // upper factor U of H⁻¹ = Uᵀ U, stored through its transpose L = Uᵀ
    let l = factor(&hinv)?;
    let l = l.lower();

    let grids = GroupGrids::fit(&problem.grid_source, cfg.bits, cfg.group_size)?;
    let rows = problem.target.rows();
    let mut codes = vec![0u8; rows * d];
    let mut comp_sq = vec![0.0; d];
    for r in 0..rows {
        let mut w: Vec<f64> = perm.iter().map(|&c| problem.target.get(r, c)).collect();
        for j in 0..d {
            let col = perm[j];
            let code = grids.quantize(r, col, w[j]);
            codes[r * d + col] = code;
            let err = (w[j] - grids.dequantize(r, col, code)) / l.get(j, j);
            comp_sq[col] += err * err;
            for k in (j + 1)..d {
                w[k] -= err * l.get(k, j);
            }
        }
    }
    let quantized = QuantizedLayer::new(grids, codes)?;
    let objective =
        quadratic_objective(&quantized.dequantize(), &problem.target, &problem.curvature)?;
    Ok(SolveReport {
        quantized: Some(quantized),
        objective,
        lambda: 0.0,
        damping,
        continuous_damping: 0.0,
        damped: false,
        per_column_comp_norms: comp_sq.into_iter().map(f64::sqrt).collect(),
        bits: cfg.bits,
        group_size: cfg.group_size,
        solver: Solver::Gptq,
    })
}

/// Expert-guided anchored quantization of one layer.
pub fn epmq_solve(
    experts: &[&Matrix],
    merged: &Matrix,
    stats: &LayerCalibStats,
    cfg: &QuantConfig,
) -> Result<SolveReport> {
    let st = build_epmq_statistics(experts, merged, stats, cfg.alpha)?;
    let (target, continuous_damping) =
        continuous_solution_damped(&st.curvature, &st.rhs, cfg.percdamp)?;
    if !target.is_finite() {
        return Err(PmqError::NonFinite("continuous solution"));
    }
    let grid_source = match cfg.grid_source {
        GridSource::Target => target.clone(),
        GridSource::Merged => merged.clone(),
    };
    let problem = SolverProblem {
        target,
        curvature: st.curvature,
        grid_source,
        cfg: cfg.clone(),
    };
    let mut report = gptq_solve(&problem)?;
    report.objective = epmq_objective(
        &report.layer().dequantize(),
        experts,
        merged,
        stats,
        st.lambda,
    )?;
    report.lambda = st.lambda;
    report.continuous_damping = continuous_damping;
    report.damped = continuous_damping > 0.0;
    report.solver = Solver::Epmq;
    Ok(report)
}

/// Exhaustive per-row search over the grid codes. `row_objective(r, row)`
/// scores a dequantized candidate for row `r`; the objective must be
/// row-separable. Returns the optimal codes and the summed objective.
pub fn brute_force_optimum(
    grids: &GroupGrids,
    row_objective: impl Fn(usize, &[f64]) -> f64,
) -> Result<(Vec<u8>, f64)> {
    let (rows, cols) = grids.shape();
    let levels = max_code(grids.bits()) as u128 + 1;
    let space = levels.checked_pow(cols as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_LIMIT {
        return Err(PmqError::SearchSpaceOverflow(space));
    }
    let maxq = max_code(grids.bits()) as u8;
    let mut codes = Vec::with_capacity(rows * cols);
    let mut total = 0.0;
    for r in 0..rows {
        let mut cand = vec![0u8; cols];
        let mut vals: Vec<f64> = (0..cols).map(|c| grids.dequantize(r, c, 0)).collect();
        let mut best = (f64::INFINITY, cand.clone());
        loop {
            let f = row_objective(r, &vals);
            if f < best.0 {
                best = (f, cand.clone());
            }
            // mixed-radix increment
            let mut c = 0;
            while c < cols && cand[c] == maxq {
                cand[c] = 0;
                vals[c] = grids.dequantize(r, c, 0);
                c += 1;
            }
            if c == cols {
                break;
            }
            cand[c] += 1;
            vals[c] = grids.dequantize(r, c, cand[c]);
        }
        total += best.0;
        codes.extend(best.1);
    }
    Ok((codes, total))
}

/// Row objective `(q − t_r) H (q − t_r)ᵀ` for [`brute_force_optimum`].
pub fn quadratic_row_objective<'a>(
    target: &'a Matrix,
    h: &'a Matrix,
) -> impl Fn(usize, &[f64]) -> f64 + 'a {
    move |r, q| {
        let t = target.row(r);
        let diff: Vec<f64> = q.iter().zip(t).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for (i, di) in diff.iter().enumerate() {
            let hrow = h.row(i);
            let mut acc = 0.0;
            for (j, dj) in diff.iter().enumerate() {
                acc += hrow[j] * dj;
            }
            s += di * acc;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::rtn_quantize;

    fn cfg(bits: u8) -> QuantConfig {
        QuantConfig::default()
            .with_bits(bits)
            .with_solver(Solver::Gptq)
    }

    #[test]
    fn identity_curvature_continuous_solution() {
        let r = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]);
        assert_eq!(continuous_solution(&Matrix::identity(3), &r).unwrap(), r);
    }

    #[test]
    fn singular_curvature_is_damped() {
        let h = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let r = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!(matches!(
            continuous_solution(&h, &r),
            Err(PmqError::Singular { .. })
        ));
        let (w, damp) = continuous_solution_damped(&h, &r, 0.01).unwrap();
        assert!((damp - 0.01).abs() < 1e-15);
        assert!(w.is_finite());
    }

    #[test]
    fn single_expert_equal_to_merged() {
        let w = Matrix::from_rows(&[vec![0.5, -0.25, 1.0], vec![-1.5, 0.75, 0.1]]);
        let x = Matrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 1.3).sin());
        let stats = LayerCalibStats::from_activations(&[x], 32).unwrap();
        let st = build_epmq_statistics(&[&w], &w, &stats, 0.1).unwrap();
        let wstar = continuous_solution(&st.curvature, &st.rhs).unwrap();
        for (a, b) in wstar.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let st0 = build_epmq_statistics(&[&w], &w, &stats, 0.0).unwrap();
        assert_eq!(st0.lambda, 0.0);
        assert_eq!(st0.curvature, stats.hessians[0]);
        assert_eq!(st0.rhs, w.matmul(&stats.hessians[0]).unwrap());
    }

    #[test]
    fn diagonal_curvature_reduces_to_rtn() {
        let w = Matrix::from_fn(4, 8, |i, j| ((i * 8 + j) as f64 * 0.77).sin());
        let p = SolverProblem {
            target: w.clone(),
            curvature: Matrix::identity(8),
            grid_source: w.clone(),
            cfg: cfg(3),
        };
        let rep = gptq_solve(&p).unwrap();
        let rtn = rtn_quantize(&w, &cfg(3)).unwrap();
        assert_eq!(rep.layer().codes(), rtn.codes());
        assert!(rep.per_column_comp_norms.iter().all(|v| v.is_finite()));
        assert_eq!(rep.per_column_comp_norms.len(), 8);
    }

    #[test]
    fn brute_force_single_column_is_nearest() {
        let t = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.9, 0.0]]).columns(0, 1);
        let grids = GroupGrids::fit(&Matrix::from_rows(&[vec![-1.0], vec![2.0]]), 2, 128).unwrap();
        let h = Matrix::identity(1);
        let (codes, _) = brute_force_optimum(&grids, quadratic_row_objective(&t, &h)).unwrap();
        for r in 0..2 {
            let nearest = grids.quantize(r, 0, t.get(r, 0));
            assert_eq!(codes[r], nearest);
        }
    }

    #[test]
    fn brute_force_rejects_large_spaces() {
        let w = Matrix::zeros(1, 12);
        let grids = GroupGrids::fit(&w, 4, 128).unwrap();
        assert!(matches!(
            brute_force_optimum(&grids, |_, _| 0.0),
            Err(PmqError::SearchSpaceOverflow(_))
        ));
    }

    #[test]
    fn brute_force_hand_table() {
        // one row, d = 3, b = 2, grid {-1, 0, 1, 2} (scale 1, zero 1)
        // target (0.6, 0.6, 0.6) with a coupling between the first two columns
        let src = Matrix::from_rows(&[vec![-1.0, 2.0, 0.5]]);
        let grids = GroupGrids::fit(&src, 2, 128).unwrap();
        assert_eq!(grids.grid(0, 0).scale, 1.0);
        assert_eq!(grids.grid(0, 0).zero, 1);
        let t = Matrix::from_rows(&[vec![0.6, 0.6, 0.6]]);
        let h = Matrix::from_rows(&[
            vec![2.0, 1.9, 0.0],
            vec![1.9, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let (codes, obj) = brute_force_optimum(&grids, quadratic_row_objective(&t, &h)).unwrap();
        // residual r = q − t: the pair (0,1) wants opposite-signed errors to
        // cancel along the strongly coupled direction, so (1, 0) or (0, 1)
        // beat the naive (1, 1): 2(0.16+0.36) − 2·1.9·0.24 = 0.128 vs 2·(0.16)·3.9 = 1.248
        assert_eq!(&codes[2..], &[2]); // column 2 → 1.0 (nearest to 0.6)
        assert!((codes[0], codes[1]) == (2, 1) || (codes[0], codes[1]) == (1, 2));
        assert!((obj - (0.128 + 0.16)).abs() < 1e-12, "{obj}");
    }
}
