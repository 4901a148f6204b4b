//! Desk-scale continual-learning laboratory: a stable affordance-token
//! substrate feeding a query-routed, conflict-aware low-rank-adapted
//! scheduler, trained on synthetic task streams with full diagnostics.

pub mod affordance;
pub mod config;
pub mod error;
pub mod graph;
pub mod numeric;
pub mod scheduler;

pub use error::{Error, Result};
