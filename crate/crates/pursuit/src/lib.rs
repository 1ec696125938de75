//! Desk-scale cooperative pursuit-evasion training.
//!
//! The crate couples a minimal reverse-mode autodiff engine, selective
//! state-space sequence blocks, a bounded 2-D pursuit-evasion simulator,
//! and a group-relative policy-optimization trainer, plus the evaluation
//! harness that drives experiments from the command line.

pub mod autodiff;
pub mod env;
pub mod error;
pub mod evader;
pub(crate) mod init;
pub mod ssm;
