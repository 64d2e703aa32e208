//! The discrete-event engine and the scaling protocols it runs.

mod baseline;
mod checkpoint;
mod coordinator;
mod drrs;
mod engine;
mod path;

pub use checkpoint::{restore_and_replay, PendingRecord, Snapshot};
pub use engine::{run, AppliedRecord, Engine, ExecutedEvent, RunResult};
