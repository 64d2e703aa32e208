//! Keyed state partitioned into key-groups, routing tables, and chunk
//! extraction/installation with per-key-group lifecycle status.

mod keygroup;
mod routing;
mod store;

pub use keygroup::{fnv1a64, key_to_keygroup, sub_keygroup};
pub use routing::RoutingTable;
pub(crate) use store::merge_values;
pub use store::{KeyGroupStatus, KeyedStateStore, StateChunk, StateValue};
