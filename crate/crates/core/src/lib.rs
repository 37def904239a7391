//! Closed-form merging of low-rank adapters (LoRM) inside a deterministic
//! federated class-incremental learning simulator.
//!
//! Module map:
//! - [`linalg`]: dense matrices, Gram statistics, ridge-regularized solves
//! - [`peft`]: LoRA, VeRA and (IA)^3 residual modules
//! - [`merge`]: the closed-form merge rules and their regression objective
//! - [`fcil`]: task splits, Dirichlet partitions, heads, evaluation
//! - [`data`] and [`train`]: synthetic data, the MLP, local SGD, Gram collection
//! - [`federation`]: the round engine, strategies and communication ledger
//! - [`experiment`]: configs, end-to-end runs, ablation suites, reports
//! - [`snapshot`]: file-based offline merging

pub mod data;
pub mod error;
pub mod experiment;
pub mod fcil;
pub mod federation;
pub mod linalg;
pub mod merge;
pub mod peft;
pub mod seed;
pub mod snapshot;
pub mod train;

pub use error::{LormError, Result};
pub use linalg::{GramStat, Matrix};
