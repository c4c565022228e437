//! Desk-scale laboratory for task-scaled embedding training.
//!
//! A frozen toy encoder ([`encoder`]) is adapted with low-rank experts
//! ([`moe_lora`]), trained with in-batch contrastive objectives whose
//! negatives may be reweighted by expert-routing distance ([`loss`]), and
//! inspected with trajectory, similarity and utilization diagnostics
//! ([`diagnostics`]). Everything is built on a small `f64` autodiff core
//! ([`numcore`]) so each formula can be checked against finite differences.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod moe_lora;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
