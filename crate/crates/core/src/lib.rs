//! Early-exit cascade evaluation over ensembles of per-stage model outputs.
//!
//! A [`ScoreTable`] holds the logits every stage produced for every sample.
//! The cascade runs stages in order and lets a sample exit as soon as its
//! uncertainty falls outside the exit window of the current stage; only
//! samples near the decision threshold of the downstream task pay for more
//! stages. [`calibrate`] resolves those thresholds and windows on validation
//! data, and [`metrics`] scores the result for selective classification, OOD
//! detection and their combination.

pub mod calibrate;
pub mod cascade;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod scoretab;
pub mod synth;
pub mod uncertainty;

pub use calibrate::{
    build_windows, refit_final_tau, resolve_tau, CoverageBase, Criterion, ExitCalibration, OperatingPoint, PolicyFile,
    QuantileSketch, Task, WindowBase, WindowSpec,
};
pub use cascade::{run_cascade, sweep_policy, CascadePolicy, CascadeTrace, ExitRule};
pub use error::{Error, Result};
pub use metrics::{report, EvalOutcome, Loss, MetricsReport, RcCurve};
pub use scoretab::{mix_subsample, Domain, MixtureSpec, ScoreTable, ScoreTableError};
pub use synth::{generate, split, SynthSpec};
pub use uncertainty::{prefix_evaluate, Combine, PrefixOutput, ScoreKind, ScoreMethod};
