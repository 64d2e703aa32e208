//! Identifier newtypes shared across the runtime.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Virtual time, in ticks.
pub type Tick = u64;

/// Globally unique message sequence number.
pub type SeqId = u64;

/// Opaque record key.
pub type Key = Vec<u8>;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_newtype!(
    /// One operator instance (one simulated node).
    InstanceId,
    "i"
);
id_newtype!(OperatorId, "op");
id_newtype!(
    /// A hash partition of the key space; the atomic unit of state migration.
    KeyGroupId,
    "kg"
);
id_newtype!(SubscaleId, "s");
id_newtype!(ChannelId, "ch");
id_newtype!(PathId, "path");

pub type CheckpointId = u64;

/// Sequence ids are `instance << 40 | counter` so they are unique per run and
/// monotone per producing instance and counter.
pub fn make_seq(instance: InstanceId, counter: u64) -> SeqId {
    ((instance.0 as u64) << 40) | (counter & ((1 << 40) - 1))
}

/// Low counter bits reserved for protocol messages emitted between two data
/// messages, so data ids do not depend on how much protocol traffic ran.
pub const CONTROL_BITS: u32 = 14;
