//! Volume-filling cross-diffusion systems with Boltzmann entropy structure:
//! state types, mobility algebra, a model catalog, hypothesis checkers, an
//! entropy-variable solver and relative-entropy diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod hypotheses;
pub mod mobility;
pub mod models;
pub mod simplex;
pub mod solver;

pub use diagnostics::TwinExperimentResult;
pub use error::{Error, Result};
pub use mobility::{AugmentedMobility, GMatrix, ProbeVector};
pub use models::{CrossDiffusionModel, ModelParams, ModelSpec, Reaction};
pub use simplex::{AugmentedComposition, Composition, EntropyVars, Grid, GridField};
pub use solver::{EntropyLedger, InitialData, SolverConfig, StepRecord, TrajectoryField};
