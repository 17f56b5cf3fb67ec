//! Discovery and estimation of heterogeneous complier average causal effects
//! under imperfect compliance.
//!
//! The pipeline: load or simulate data with a binary instrument, split it into
//! honest discovery/inference halves, fit Bayesian tree-ensemble surfaces for
//! the instrument propensity, the intention-to-treat effect, and the compliance
//! rate, derive per-unit complier effects, discover interpretable subgroups
//! with a shallow CART, and estimate within-node effects on the held-out half
//! via the Wald / two-stage least squares estimator with weak-instrument
//! screening.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `bcfiv` binary for the batch CLI.

pub mod bart;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod montecarlo;
pub mod rng;
pub mod simgen;
pub mod subgroups;
pub mod surfaces;
pub mod tree;

pub use dataset::{Dataset, HonestSplit, OutcomeKind};
pub use error::Error;
pub use estimators::{AnnotatedTree, NodeEstimate};
pub use subgroups::SubgroupTree;
pub use surfaces::{FitMode, Surfaces, Variant};
pub use tree::{CartConfig, DecisionTree, SplitRule};
