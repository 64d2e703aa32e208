//! Workload generation, operator logic, metrics and verification.

pub mod batch;
pub mod metrics;
pub mod operators;
pub mod scenario;
pub mod verify;
pub mod workload;
