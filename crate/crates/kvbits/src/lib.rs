//! Mixed-precision bit allocation for transformer KV caches.
//!
//! The library treats each (layer, head) cache — keys and values separately —
//! as one quantization component with a positive sensitivity weight and an
//! exponential distortion-rate model `D(b) = alpha * beta^(-b)`. On top of
//! that it provides:
//!
//! - ingestion and synthesis of per-head sensitivity maps ([`sensitivity`]);
//! - an exact Lloyd-Max distortion oracle for the unit Gaussian and
//!   least-squares model calibration ([`distortion`]);
//! - round-to-nearest quantizer simulators for measuring distortion-rate
//!   points on synthetic tensors ([`quantizers`]);
//! - continuous reverse waterfilling, optimal greedy integer allocation,
//!   separate key/value budgets and gain prediction ([`allocator`]);
//! - synthetic end-to-end evaluation against built-in oracles
//!   ([`evaluator`]);
//! - a batch CLI over stable file formats ([`cli`]).
//!
//! All randomness is ChaCha8 keyed by explicit seeds with inverse-CDF normal
//! sampling, so every result in the crate is a pure function of its inputs.

pub mod allocator;
pub mod cli;
pub mod distortion;
pub mod error;
pub mod evaluator;
pub mod gauss;
pub mod quantizers;
pub mod sensitivity;

pub use allocator::{
    allocate_kv_joint, allocate_kv_separate, continuous_allocate, greedy_allocate,
    marginal_gain_table, predict_gain, realized_gain, Allocation, AllocationProblem, Component,
    ComponentId, KvAllocation, KvMode, Side,
};
pub use distortion::{
    eval_distortion, fit_exponential, fit_quality_report, lloyd_max, lloyd_max_mse,
    DistortionModel, MsePoint,
};
pub use error::{Error, Result};
pub use evaluator::{brute_force_integer_optimum, simulate, SimulationReport};
pub use quantizers::{
    hadamard_transform, measure_mse, quantize_dequantize, QuantizerSpec, Scheme, TensorBlock,
};
pub use sensitivity::{load_sensitivity, stats, synth_lognormal, SensitivityMap, SensitivityStats};
