//! Post-merge quantization of merged expert models.
//!
//! Given `K` fine-tuned experts, their merge `W_m` and per-task calibration
//! data, every linear layer is quantized to minimize
//! `Σ_i ‖Q X_i − W_i X_i‖² + λ ‖Q − W_m‖²`, which reduces to a GPTQ solve
//! toward `W* = R H_E⁻¹` under the effective Hessian `H_E`.

pub mod calib;
pub mod checkpoint;
pub mod error;
pub mod matrix;
pub mod merge;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod solver;
pub mod synthetic;

pub use calib::{anchor_lambda, CalibSet, LayerCalibStats, TaskData};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Activation, Checkpoint, DType, Layer, ModelManifest,
};
pub use error::{PmqError, Result};
pub use matrix::{Cholesky, Matrix};
pub use merge::{merge, MergeMethod, MergeSpec};
pub use model::{load_model, save_model, Model};
pub use pipeline::{deviation_diagnostics, evaluate, run, run_epmq, run_naive_ptq, PmqRun};
pub use quant::{GroupGrids, QuantConfig, QuantizedLayer, Solver};
pub use synthetic::{make_synthetic_tasks, SyntheticProblem, SyntheticSpec};
