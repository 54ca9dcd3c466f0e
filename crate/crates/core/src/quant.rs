//! b-bit weight-only uniform affine quantization with per-group grids.
//!
//! Groups run along the input dimension of each output row. Grids are
//! asymmetric min-max over the group range extended to contain zero, so zero
//! is always exactly representable and every value in the group lies within
//! half a step of the grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{take_tensor, RawTensor, TensorData};
use crate::error::{PmqError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Rtn,
    Gptq,
    Epmq,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Rtn => "rtn",
            Solver::Gptq => "gptq",
            Solver::Epmq => "epmq",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = PmqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(Solver::Rtn),
            "gptq" => Ok(Solver::Gptq),
            "epmq" => Ok(Solver::Epmq),
            other => Err(PmqError::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// Which weight the E-PMQ grids are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GridSource {
    /// The continuous target `W*`.
    #[default]
    Target,
    /// The merged weight `W_m`.
    Merged,
}

/// Which model state produces the calibration inputs of each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// The current partially quantized model.
    #[default]
    Quantized,
    /// The frozen full-precision merged model.
    FullPrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub percdamp: f64,
    pub alpha: f64,
    pub solver: Solver,
    pub samples_per_task: usize,
    pub grid_source: GridSource,
    pub trajectory: Trajectory,
    /// Re-run the model prefix for every layer instead of advancing the cache.
    pub recompute_trajectory: bool,
    /// GPTQ column order by descending curvature diagonal; grids stay per
    /// original group.
    pub act_order: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 128,
            percdamp: 0.01,
            alpha: 0.01,
            solver: Solver::Epmq,
            samples_per_task: 256,
            grid_source: GridSource::Target,
            trajectory: Trajectory::Quantized,
            recompute_trajectory: false,
            act_order: false,
        }
    }
}

impl QuantConfig {
    /// LLM protocol: group size 32, α = 1.
    pub fn llm_preset() -> Self {
        QuantConfig {
            group_size: 32,
            alpha: 1.0,
            ..Default::default()
        }
    }

    /// For mergers whose output is already close to the experts.
    pub fn strong_merger_preset() -> Self {
        QuantConfig {
            alpha: 10.0,
            ..Default::default()
        }
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(PmqError::Config(format!(
                "bits must be in 2..=8, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(PmqError::Config("group_size must be positive".into()));
        }
        if self.solver != Solver::Rtn && !(self.percdamp > 0.0 && self.percdamp.is_finite()) {
            return Err(PmqError::Config(
                "percdamp must be positive for calibrated solvers".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(PmqError::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.samples_per_task == 0 {
            return Err(PmqError::Config("samples_per_task must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Smallest f32-representable value that is >= `s` (for positive `s`), so
/// scales survive f32 storage unchanged and never shrink the grid span.
fn f32_ceil(s: f64) -> f64 {
    let f = s as f32;
    let f = if (f as f64) < s {
        f32::from_bits(f.to_bits() + 1)
    } else {
        f
    };
    f as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub scale: f64,
    pub zero: i32,
}

/// Asymmetric min-max grid over `values ∪ {0}`.
pub fn fit_grid(values: &[f64], bits: u8) -> Result<Grid> {
    if values.is_empty() {
        return Err(PmqError::Config(
            "cannot fit a grid to an empty group".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PmqError::NonFinite("fit_grid"));
    }
    let maxq = max_code(bits) as f64;
    let lo = values.iter().copied().fold(0.0, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let scale = if hi > lo {
        f32_ceil((hi - lo) / maxq)
    } else {
        1.0
    };
    if !scale.is_finite() {
        return Err(PmqError::NonFinite("fit_grid scale"));
    }
    let zero = (-lo / scale).round().clamp(0.0, maxq) as i32;
    Ok(Grid { scale, zero })
}

/// `clamp(round(w/scale) + zero, 0, 2^b − 1)`, rounding half away from zero.
#[inline]
pub fn quantize_value(w: f64, scale: f64, zero: i32, bits: u8) -> u8 {
    let q = (w / scale).round() + zero as f64;
    q.clamp(0.0, max_code(bits) as f64) as u8
}

#[inline]
pub fn dequantize_value(code: u8, scale: f64, zero: i32) -> f64 {
    scale * (code as i32 - zero) as f64
}

/// Per-row, per-group grids for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrids {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    scales: Vec<f64>,
    zeros: Vec<i32>,
}

impl GroupGrids {
    pub fn fit(w: &Matrix, bits: u8, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(PmqError::Config("group_size must be positive".into()));
        }
        let (rows, cols) = w.shape();
        let ng = cols.div_ceil(group_size);
        let mut scales = Vec::with_capacity(rows * ng);
        let mut zeros = Vec::with_capacity(rows * ng);
        for r in 0..rows {
            let row = w.row(r);
            for g in 0..ng {
                let end = ((g + 1) * group_size).min(cols);
                let grid = fit_grid(&row[g * group_size..end], bits)?;
                scales.push(grid.scale);
                zeros.push(grid.zero);
            }
        }
        Ok(GroupGrids {
            rows,
            cols,
            bits,
            group_size,
            scales,
            zeros,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[i32] {
        &self.zeros
    }

    #[inline]
    pub fn grid(&self, r: usize, c: usize) -> Grid {
        let idx = r * self.num_groups() + c / self.group_size;
        Grid {
            scale: self.scales[idx],
            zero: self.zeros[idx],
        }
    }

    #[inline]
    pub fn quantize(&self, r: usize, c: usize, w: f64) -> u8 {
        let g = self.grid(r, c);
        quantize_value(w, g.scale, g.zero, self.bits)
    }

    #[inline]
    pub fn dequantize(&self, r: usize, c: usize, code: u8) -> f64 {
        let g = self.grid(r, c);
        dequantize_value(code, g.scale, g.zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    grids: GroupGrids,
    /// Unpacked codes, row-major `d_out × d_in`.
    codes: Vec<u8>,
}

impl QuantizedLayer {
    pub fn new(grids: GroupGrids, codes: Vec<u8>) -> Result<Self> {
        let (r, c) = grids.shape();
        if codes.len() != r * c {
            return Err(PmqError::shape("QuantizedLayer codes", r * c, codes.len()));
        }
        let maxq = max_code(grids.bits);
        if codes.iter().any(|&q| q as u32 > maxq) {
            return Err(PmqError::Config(format!(
                "code exceeds {maxq} for {} bits",
                grids.bits
            )));
        }
        Ok(QuantizedLayer { grids, codes })
    }

    pub fn grids(&self) -> &GroupGrids {
        &self.grids
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn bits(&self) -> u8 {
        self.grids.bits
    }

    pub fn group_size(&self) -> usize {
        self.grids.group_size
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grids.shape()
    }

    pub fn dequantize(&self) -> Matrix {
        let (rows, cols) = self.shape();
        Matrix::from_fn(rows, cols, |r, c| {
            self.grids.dequantize(r, c, self.codes[r * cols + c])
        })
    }

    pub fn to_tensors(&self, id: &str, out: &mut BTreeMap<String, RawTensor>) {
        let (rows, cols) = self.shape();
        let packed = pack_codes(&self.codes, self.bits(), rows, cols);
        let ng = self.grids.num_groups();
        out.insert(
            format!("{id}.codes"),
            RawTensor {
                shape: vec![rows, packed_row_bytes(cols, self.bits())],
                data: TensorData::U8(packed),
            },
        );
        out.insert(
            format!("{id}.scales"),
            RawTensor {
                shape: vec![rows, ng],
                data: TensorData::F32(self.grids.scales.iter().map(|s| *s as f32).collect()),
            },
        );
        out.insert(
            format!("{id}.zeros"),
            RawTensor {
                shape: vec![rows, ng],
                data: TensorData::I32(self.grids.zeros.clone()),
            },
        );
    }

    pub fn from_tensors(
        id: &str,
        tensors: &BTreeMap<String, RawTensor>,
        rows: usize,
        cols: usize,
        attrs: QuantAttrs,
    ) -> Result<Self> {
        if !(2..=8).contains(&attrs.bits) || attrs.group_size == 0 {
            return Err(PmqError::MalformedHeader(format!(
                "bad quantization attrs for `{id}`"
            )));
        }
        let ng = cols.div_ceil(attrs.group_size);
        let codes_name = format!("{id}.codes");
        let codes = match &take_tensor(tensors, &codes_name)?.data {
            TensorData::U8(b) => unpack_codes(b, attrs.bits, rows, cols)?,
            _ => {
                return Err(PmqError::DtypeMismatch {
                    name: codes_name,
                    expected: "U8".into(),
                    found: "other".into(),
                })
            }
        };
        let scales_name = format!("{id}.scales");
        let scales = match &take_tensor(tensors, &scales_name)?.data {
            TensorData::F32(v) => v.iter().map(|s| *s as f64).collect::<Vec<_>>(),
            _ => {
                return Err(PmqError::DtypeMismatch {
                    name: scales_name,
                    expected: "F32".into(),
                    found: "other".into(),
                })
            }
        };
        let zeros_name = format!("{id}.zeros");
        let zeros = match &take_tensor(tensors, &zeros_name)?.data {
            TensorData::I32(v) => v.clone(),
            _ => {
                return Err(PmqError::DtypeMismatch {
                    name: zeros_name,
                    expected: "I32".into(),
                    found: "other".into(),
                })
            }
        };
        if scales.len() != rows * ng || zeros.len() != rows * ng {
            return Err(PmqError::TruncatedPayload(format!(
                "grid tensors of `{id}`"
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PmqError::NonFinite("stored scale"));
        }
        let grids = GroupGrids {
            rows,
            cols,
            bits: attrs.bits,
            group_size: attrs.group_size,
            scales,
            zeros,
        };
        QuantizedLayer::new(grids, codes)
    }

    pub fn attrs(&self) -> QuantAttrs {
        QuantAttrs {
            bits: self.bits(),
            group_size: self.group_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantAttrs {
    pub bits: u8,
    pub group_size: usize,
}

/// Round-to-nearest on grids fitted per row and group.
pub fn rtn_quantize(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedLayer> {
    if !w.is_finite() {
        return Err(PmqError::NonFinite("rtn_quantize input"));
    }
    let grids = GroupGrids::fit(w, cfg.bits, cfg.group_size)?;
    let (rows, cols) = w.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, v) in w.row(r).iter().enumerate() {
            codes.push(grids.quantize(r, c, *v));
        }
    }
    QuantizedLayer::new(grids, codes)
}

pub fn packed_row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

/// Packs codes row by row into a little-endian bitstream, lowest bits first,
/// each row padded to a byte boundary.
pub fn pack_codes(codes: &[u8], bits: u8, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(
        codes.len(),
        rows * cols,
        "code count must equal rows * cols"
    );
    let row_bytes = packed_row_bytes(cols, bits);
    let mut out = vec![0u8; rows * row_bytes];
    for r in 0..rows {
        let dst = &mut out[r * row_bytes..(r + 1) * row_bytes];
        let mut bit = 0usize;
        for &code in &codes[r * cols..(r + 1) * cols] {
            for k in 0..bits as usize {
                if code >> k & 1 == 1 {
                    dst[bit / 8] |= 1 << (bit % 8);
                }
                bit += 1;
            }
        }
    }
    out
}

pub fn unpack_codes(packed: &[u8], bits: u8, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let row_bytes = packed_row_bytes(cols, bits);
    if packed.len() != rows * row_bytes {
        return Err(PmqError::PayloadLength {
            expected: rows * row_bytes,
            found: packed.len(),
        });
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let src = &packed[r * row_bytes..(r + 1) * row_bytes];
        let mut bit = 0usize;
        for _ in 0..cols {
            let mut code = 0u8;
            for k in 0..bits as usize {
                code |= (src[bit / 8] >> (bit % 8) & 1) << k;
                bit += 1;
            }
            out.push(code);
        }
    }
    Ok(out)
}
