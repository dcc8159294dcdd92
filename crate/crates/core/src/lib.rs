//! Band-wise RoPE rescaling for quantized, position-interpolated attention.
//!
//! The pipeline: partition RoPE pairs into log-frequency bands, measure how
//! interpolation and outlier growth stress each band ([`diagnostics`]),
//! derive per-band scale windows and search them against an objective
//! ([`search`], [`evaluator`]), then write the plan and patch checkpoints
//! ([`io`]).

pub mod bands;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod linalg;
pub mod par;
pub mod quant;
pub mod rope;
pub mod search;

pub use bands::{partition_log_freq, BandPartition};
pub use diagnostics::{diagnose_bundle, ActivationCache, DiagnosticsReport};
pub use error::{Error, ErrorClass, Result};
pub use evaluator::{
    synth_model, ExternalEvaluator, LogitMse, ModelBundle, ObjectiveSpec, OutlierSpec, SynthDims,
};
pub use linalg::Matrix;
pub use quant::{Granularity, QuantSpec};
pub use rope::{Pairing, RopeConfig, ScalingScheme};
pub use search::{
    apply_scale_plan, run_qroar, run_qroar_on_bundle, Objective, ScaleMode, ScalePlan,
    SearchConfig, Strategy,
};
