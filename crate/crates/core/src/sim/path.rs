//! Migration paths: FIFO links between two instances that carry state
//! chunks, rerouted records and confirms, and fetch traffic.

use std::collections::VecDeque;

use crate::ids::{CheckpointId, InstanceId, KeyGroupId, PathId, SubscaleId, Tick};
use crate::message::StreamMessage;
use crate::state::StateChunk;

#[derive(Clone, Debug)]
pub(crate) enum PathItem {
    /// State chunk, rerouted record or rerouted confirm.
    Msg(StreamMessage),
    /// Checkpoint marker separating pre- and post-snapshot traffic.
    Marker(CheckpointId),
    /// Fetch-on-demand: `requester` wants sub-key-group `sub` of `kg`.
    Fetch {
        kg: KeyGroupId,
        sub: u32,
        requester: InstanceId,
    },
    /// Fetch-on-demand: a sub-key-group's entries.
    Fetched { chunk: StateChunk, sub: u32 },
    /// Fetch-on-demand: `source` has consumed every pre-scaling record from
    /// predecessor `channel`.
    Drained {
        source: InstanceId,
        channel: InstanceId,
        sync: SubscaleId,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Path {
    pub id: PathId,
    pub from: InstanceId,
    pub to: InstanceId,
    pub queue: VecDeque<(Tick, PathItem)>,
    /// When the link finishes serializing the last item sent.
    pub link_free: Tick,
    /// The last checkpoint marker delivered on this path.
    pub after_marker: Option<CheckpointId>,
    /// Items delivered while the receiver records in-transit state.
    pub recording: Option<CheckpointId>,
}

impl Path {
    pub fn new(id: PathId, from: InstanceId, to: InstanceId) -> Self {
        Path {
            id,
            from,
            to,
            queue: VecDeque::new(),
            link_free: 0,
            after_marker: None,
            recording: None,
        }
    }

    /// Serializes `item` after everything already sent; returns its arrival.
    pub fn send(&mut self, now: Tick, item: PathItem, size_ticks: Tick, latency: Tick) -> Tick {
        let start = now.max(self.link_free);
        self.link_free = start + size_ticks;
        let arrive = self.link_free + latency;
        self.queue.push_back((arrive, item));
        arrive
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn has_arrived(&self, now: Tick) -> bool {
        self.queue.front().is_some_and(|(t, _)| *t <= now)
    }
}
