//! Core library for privacy scoring of fine-tuning data.
//!
//! The pipeline quantifies, per record, how confidently a membership
//! inference attacker can tell whether that record was used to fine-tune a
//! model. Scores near 1 mean the record is easy to identify (high leakage),
//! scores near 0 mean the attacker does no better than coin flipping.
//!
//! Modules:
//! - [`dataset`]: labeled records, synthetic generation, CSV I/O.
//! - [`model`]: small dense classifiers (logistic regression / MLP) trained
//!   with plain SGD; enough capacity for desk-scale experiments while staying
//!   deterministic and dependency-free.
//! - [`lira`]: offline likelihood-ratio attack primitives (confidence
//!   statistic, shadow ensembles, Gaussian fits, one-sided decision rule).
//! - [`scoring`]: the batch scoring algorithm (n fine-tuned models score a
//!   whole batch at once), the per-sample baseline it amortizes, and report
//!   plumbing.
//! - [`rng`]: seed derivation so every stochastic step is reproducible and
//!   independent of thread scheduling.

pub mod dataset;
pub mod lira;
pub mod model;
pub mod rng;
pub mod scoring;
mod util;
