use thiserror::Error;

use crate::ids::{CheckpointId, InstanceId, KeyGroupId, SubscaleId};
use crate::state::KeyGroupStatus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("dataflow graph contains a cycle through operator `{0}`")]
    GraphCycle(String),
    #[error("invalid partitioning: {0}")]
    InvalidPartitioning(String),
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("channel {0} is closed")]
    ChannelClosed(u32),
    #[error("channels have different senders ({0} vs {1})")]
    SenderMismatch(InstanceId, InstanceId),
    #[error("simulation has no pending events")]
    SimulationDrained,
    #[error("checkpoint {0} is already in flight")]
    DuplicateCheckpoint(CheckpointId),
    #[error("routing table has no entry for key-group {0}")]
    IncompleteTable(KeyGroupId),
    #[error("illegal status transition for key-group {kg}: {from:?} -> {to:?}")]
    IllegalStateTransition {
        kg: KeyGroupId,
        from: Option<KeyGroupStatus>,
        to: KeyGroupStatus,
    },
    #[error("duplicate state chunk for key-group {0}")]
    DuplicateChunk(KeyGroupId),
    #[error("unexpected state chunk for key-group {0}")]
    UnexpectedChunk(KeyGroupId),
    #[error("subscale {0} overlaps key-groups of an active subscale")]
    SubscaleOverlap(SubscaleId),
    #[error("stale trigger for completed subscale {0}")]
    StaleTrigger(SubscaleId),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("duplicate rerouted confirm from {channel} for subscale {subscale}")]
    DuplicateConfirm {
        channel: InstanceId,
        subscale: SubscaleId,
    },
    #[error("key-group {0} has not migrated out")]
    NotMigrated(KeyGroupId),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("instance id {0} already deployed")]
    DeployConflict(InstanceId),
    #[error("scaling session still has incomplete subscales")]
    SessionIncomplete,
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("watermark regressed from {prev} to {next}")]
    WatermarkRegression { prev: u64, next: u64 },
    #[error("trace is missing injection events")]
    IncompleteTrace,
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
