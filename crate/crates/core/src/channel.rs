//! FIFO channels with a priority lane and a sender-side output cache.
//!
//! A message sent on the normal lane first lands in the sender's output
//! cache. It is transmitted into the receiver's input queue while the input
//! queue holds fewer than `capacity` messages; transmission takes the
//! configured network latency. Priority-lane messages skip the output cache
//! and are always dequeued before normal-lane messages.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::ids::{ChannelId, InstanceId, KeyGroupId, Tick};
use crate::message::{MessageKind, StreamMessage};
use crate::state::key_to_keygroup;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Lane {
    Normal,
    Priority,
}

/// A message sitting in a receiver's input queue.
#[derive(Clone, Debug, PartialEq)]
pub struct Queued {
    pub arrive_at: Tick,
    /// Position in wire order on this channel.
    pub pos: u64,
    pub msg: StreamMessage,
}

#[derive(Clone, Debug)]
pub struct Channel {
    pub id: ChannelId,
    pub sender: InstanceId,
    pub receiver: InstanceId,
    output_cache: VecDeque<StreamMessage>,
    normal: VecDeque<Queued>,
    priority: VecDeque<Queued>,
    capacity: usize,
    closed: bool,
    next_pos: u64,
    last_arrival: Tick,
}

impl Channel {
    pub fn new(id: ChannelId, sender: InstanceId, receiver: InstanceId, capacity: usize) -> Self {
        Channel {
            id,
            sender,
            receiver,
            output_cache: VecDeque::new(),
            normal: VecDeque::new(),
            priority: VecDeque::new(),
            capacity: capacity.max(1),
            closed: false,
            next_pos: 0,
            last_arrival: 0,
        }
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Appends `msg` to the named lane. Normal-lane messages go to the output
    /// cache and must be moved with [`Channel::transmit`]; priority messages
    /// arrive after `latency`.
    pub fn enqueue(
        &mut self,
        msg: StreamMessage,
        lane: Lane,
        now: Tick,
        latency: Tick,
    ) -> Result<Option<Tick>> {
        if self.closed {
            return Err(Error::ChannelClosed(self.id.0));
        }
        match lane {
            Lane::Normal => {
                self.output_cache.push_back(msg);
                Ok(None)
            }
            Lane::Priority => {
                let arrive_at = now + latency;
                let pos = self.take_pos();
                self.priority.push_back(Queued {
                    arrive_at,
                    pos,
                    msg,
                });
                Ok(Some(arrive_at))
            }
        }
    }

    /// Puts `msg` at the front of the output cache (priority only within the
    /// cache; it travels the wire on the normal lane).
    pub fn push_cache_front(&mut self, msg: StreamMessage) {
        self.output_cache.push_front(msg);
    }

    /// Inserts `msg` into the output cache right after index `idx`.
    pub fn insert_cache_after(&mut self, idx: usize, msg: StreamMessage) {
        self.output_cache.insert(idx + 1, msg);
    }

    fn take_pos(&mut self) -> u64 {
        let p = self.next_pos;
        self.next_pos += 1;
        p
    }

    /// Moves messages from the output cache onto the wire while the receiver
    /// has room. Returns the arrival tick of the first transmitted message.
    pub fn transmit(&mut self, now: Tick, latency: Tick) -> Option<Tick> {
        let mut first = None;
        while self.normal.len() < self.capacity {
            let Some(msg) = self.output_cache.pop_front() else {
                break;
            };
            // Arrivals never overtake each other on one wire.
            let arrive_at = (now + latency).max(self.last_arrival);
            self.last_arrival = arrive_at;
            let pos = self.take_pos();
            self.normal.push_back(Queued {
                arrive_at,
                pos,
                msg,
            });
            first.get_or_insert(arrive_at);
        }
        first
    }

    /// Next deliverable message: priority lane first, then the normal lane.
    pub fn dequeue(&mut self, now: Tick) -> Option<Queued> {
        if self.priority.front().is_some_and(|q| q.arrive_at <= now) {
            return self.priority.pop_front();
        }
        if self.normal.front().is_some_and(|q| q.arrive_at <= now) {
            return self.normal.pop_front();
        }
        None
    }

    pub fn priority_head(&self, now: Tick) -> Option<&Queued> {
        self.priority.front().filter(|q| q.arrive_at <= now)
    }

    pub fn pop_priority(&mut self) -> Option<Queued> {
        self.priority.pop_front()
    }

    pub fn normal_head(&self, now: Tick) -> Option<&Queued> {
        self.normal.front().filter(|q| q.arrive_at <= now)
    }

    /// Arrived normal-lane messages in order, at most `limit`.
    pub fn arrived_window(&self, now: Tick, limit: usize) -> impl Iterator<Item = &Queued> {
        self.normal
            .iter()
            .take(limit)
            .take_while(move |q| q.arrive_at <= now)
    }

    /// Removes the normal-lane message at `idx` (intra-channel scheduling).
    pub fn take_normal_at(&mut self, idx: usize) -> Option<Queued> {
        self.normal.remove(idx)
    }

    pub fn pop_normal(&mut self) -> Option<Queued> {
        self.normal.pop_front()
    }

    /// Earliest arrival among queued messages that have not arrived yet.
    pub fn next_arrival_after(&self, now: Tick) -> Option<Tick> {
        let p = self.priority.iter().map(|q| q.arrive_at).find(|&t| t > now);
        let n = self.normal.iter().map(|q| q.arrive_at).find(|&t| t > now);
        match (p, n) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn has_queued_input(&self) -> bool {
        !self.normal.is_empty() || !self.priority.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.normal.len() + self.priority.len()
    }

    pub fn cache_len(&self) -> usize {
        self.output_cache.len()
    }

    pub fn output_cache(&self) -> &VecDeque<StreamMessage> {
        &self.output_cache
    }

    pub fn input_queue(&self) -> impl Iterator<Item = &Queued> {
        self.priority.iter().chain(self.normal.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.output_cache.is_empty() && !self.has_queued_input()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Index of the first checkpoint barrier in the output cache.
    pub fn cache_checkpoint_position(&self) -> Option<usize> {
        self.output_cache
            .iter()
            .position(|m| m.kind == MessageKind::CheckpointBarrier)
    }

    /// Whether an unprocessed checkpoint barrier sits in the input queue.
    pub fn input_has_checkpoint(&self) -> bool {
        self.normal
            .iter()
            .any(|q| q.msg.kind == MessageKind::CheckpointBarrier)
    }
}

/// Moves every cached data message whose key falls into `keygroups` from
/// `old`'s output cache to `new`'s, starting at cache index `from`.
///
/// Moved messages keep their relative order and are merged into `new`'s
/// cache by sequence id, so their position relative to broadcast watermarks
/// carrying the same sequence ids is preserved. Returns the number moved.
pub fn redirect_output_cache_from(
    old: &mut Channel,
    new: &mut Channel,
    keygroups: &BTreeSet<KeyGroupId>,
    num_keygroups: u32,
    from: usize,
) -> Result<usize> {
    if old.sender != new.sender {
        return Err(Error::SenderMismatch(old.sender, new.sender));
    }
    let matches = |m: &StreamMessage| {
        m.kind == MessageKind::Data
            && m.key
                .as_deref()
                .is_some_and(|k| keygroups.contains(&key_to_keygroup(k, num_keygroups)))
    };
    let mut kept = VecDeque::with_capacity(old.output_cache.len());
    let mut moved = Vec::new();
    for (i, m) in old.output_cache.drain(..).enumerate() {
        if i >= from && matches(&m) {
            moved.push(m);
        } else {
            kept.push_back(m);
        }
    }
    old.output_cache = kept;
    let count = moved.len();
    if count > 0 {
        let existing: Vec<_> = new.output_cache.drain(..).collect();
        new.output_cache = merge_by_seq(existing, moved);
    }
    Ok(count)
}

/// [`redirect_output_cache_from`] over the whole cache.
pub fn redirect_output_cache(
    old: &mut Channel,
    new: &mut Channel,
    keygroups: &BTreeSet<KeyGroupId>,
    num_keygroups: u32,
) -> Result<usize> {
    redirect_output_cache_from(old, new, keygroups, num_keygroups, 0)
}

fn merge_by_seq(a: Vec<StreamMessage>, b: Vec<StreamMessage>) -> VecDeque<StreamMessage> {
    let mut out = VecDeque::with_capacity(a.len() + b.len());
    let (mut ia, mut ib) = (a.into_iter().peekable(), b.into_iter().peekable());
    loop {
        match (ia.peek(), ib.peek()) {
            (Some(x), Some(y)) => {
                if y.seq_id < x.seq_id {
                    out.push_back(ib.next().unwrap());
                } else {
                    out.push_back(ia.next().unwrap());
                }
            }
            (Some(_), None) => out.push_back(ia.next().unwrap()),
            (None, Some(_)) => out.push_back(ib.next().unwrap()),
            (None, None) => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SubscaleId;

    fn data(seq: u64, key: &[u8]) -> StreamMessage {
        StreamMessage::data(InstanceId(0), seq, key.to_vec(), 1, 0)
    }

    fn drain(ch: &mut Channel, now: Tick) -> Vec<u64> {
        let mut out = vec![];
        loop {
            ch.transmit(now, 0);
            match ch.dequeue(now) {
                Some(q) => out.push(q.msg.seq_id),
                None => break,
            }
        }
        out
    }

    #[test]
    fn priority_message_dequeued_before_normal_backlog() {
        let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 100);
        for s in 1..=3 {
            ch.enqueue(data(s, b"k"), Lane::Normal, 0, 1).unwrap();
        }
        ch.transmit(0, 1);
        ch.enqueue(
            StreamMessage::trigger(InstanceId(0), 99, SubscaleId(0), 0),
            Lane::Priority,
            0,
            1,
        )
        .unwrap();
        assert_eq!(drain(&mut ch, 1), vec![99, 1, 2, 3]);
    }

    #[test]
    fn empty_channel_delivers_immediately() {
        let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        ch.enqueue(data(1, b"a"), Lane::Normal, 5, 0).unwrap();
        assert_eq!(ch.transmit(5, 0), Some(5));
        assert_eq!(ch.dequeue(5).unwrap().msg.seq_id, 1);
    }

    #[test]
    fn priority_lane_is_fifo() {
        let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        for s in [7, 8] {
            ch.enqueue(
                StreamMessage::trigger(InstanceId(0), s, SubscaleId(s as u32), 0),
                Lane::Priority,
                0,
                1,
            )
            .unwrap();
        }
        assert_eq!(drain(&mut ch, 1), vec![7, 8]);
    }

    #[test]
    fn closed_channel_rejects() {
        let mut ch = Channel::new(ChannelId(3), InstanceId(0), InstanceId(1), 10);
        ch.close();
        assert_eq!(
            ch.enqueue(data(1, b"a"), Lane::Normal, 0, 0),
            Err(Error::ChannelClosed(3))
        );
    }

    #[test]
    fn capacity_holds_back_output_cache() {
        let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 2);
        for s in 0..5 {
            ch.enqueue(data(s, b"a"), Lane::Normal, 0, 0).unwrap();
        }
        ch.transmit(0, 1);
        assert_eq!(ch.cache_len(), 3);
        assert_eq!(ch.input_len(), 2);
        assert!(
            ch.dequeue(0).is_none(),
            "nothing arrives before the latency"
        );
        assert!(ch.dequeue(1).is_some());
        ch.transmit(1, 1);
        assert_eq!(ch.cache_len(), 2);
    }

    /// Finds keys for given key-groups under K.
    fn key_in(kg: u32, k: u32) -> Vec<u8> {
        (0..)
            .map(|i| format!("r{i}").into_bytes())
            .find(|key| key_to_keygroup(key, k).0 == kg)
            .unwrap()
    }

    #[test]
    fn redirect_moves_migrating_keys_in_order() {
        let k = 8;
        let (k1, k2, k3, k4) = (key_in(1, k), key_in(2, k), key_in(3, k), key_in(4, k));
        let mut c1 = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        let mut c2 = Channel::new(ChannelId(1), InstanceId(0), InstanceId(2), 10);
        for (s, key) in [(1, &k1), (3, &k3), (2, &k2), (4, &k4)] {
            c1.enqueue(data(s, key), Lane::Normal, 0, 0).unwrap();
        }
        let kgs = BTreeSet::from([KeyGroupId(3), KeyGroupId(4)]);
        let moved = redirect_output_cache(&mut c1, &mut c2, &kgs, k).unwrap();
        assert_eq!(moved, 2);
        let old: Vec<_> = c1.output_cache().iter().map(|m| m.seq_id).collect();
        let new: Vec<_> = c2.output_cache().iter().map(|m| m.seq_id).collect();
        assert_eq!(old, vec![1, 2]);
        assert_eq!(new, vec![3, 4]);
    }

    #[test]
    fn redirect_empty_cache_moves_nothing() {
        let mut c1 = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        let mut c2 = Channel::new(ChannelId(1), InstanceId(0), InstanceId(2), 10);
        let kgs = BTreeSet::from([KeyGroupId(0)]);
        assert_eq!(redirect_output_cache(&mut c1, &mut c2, &kgs, 4).unwrap(), 0);
    }

    #[test]
    fn redirect_requires_same_sender() {
        let mut c1 = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        let mut c2 = Channel::new(ChannelId(1), InstanceId(5), InstanceId(2), 10);
        assert_eq!(
            redirect_output_cache(&mut c1, &mut c2, &BTreeSet::new(), 4),
            Err(Error::SenderMismatch(InstanceId(0), InstanceId(5)))
        );
    }

    #[test]
    fn redirect_keeps_watermark_relative_order() {
        let k = 8;
        let k3 = key_in(3, k);
        let mut c1 = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
        let mut c2 = Channel::new(ChannelId(1), InstanceId(0), InstanceId(2), 10);
        c1.enqueue(data(1, &k3), Lane::Normal, 0, 0).unwrap();
        // Broadcast watermark: same sequence id on both channels.
        c1.enqueue(
            StreamMessage::watermark(InstanceId(0), 2, 5),
            Lane::Normal,
            0,
            0,
        )
        .unwrap();
        c2.enqueue(
            StreamMessage::watermark(InstanceId(0), 2, 5),
            Lane::Normal,
            0,
            0,
        )
        .unwrap();
        c1.enqueue(data(3, &k3), Lane::Normal, 0, 0).unwrap();
        redirect_output_cache(&mut c1, &mut c2, &BTreeSet::from([KeyGroupId(3)]), k).unwrap();
        let new: Vec<_> = c2.output_cache().iter().map(|m| m.seq_id).collect();
        assert_eq!(new, vec![1, 2, 3]);
    }

    proptest::proptest! {
        /// Per-key subsequences are identical before and after redirection,
        /// whichever side each key ends up on.
        #[test]
        fn redirect_preserves_per_key_order(keys in proptest::collection::vec(0u32..8, 0..60), migrating in proptest::collection::btree_set(0u32..8, 0..8)) {
            let k = 8;
            let mut c1 = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 10);
            let mut c2 = Channel::new(ChannelId(1), InstanceId(0), InstanceId(2), 10);
            let keyed: Vec<Vec<u8>> = (0..8).map(|g| key_in(g, k)).collect();
            for (s, g) in keys.iter().enumerate() {
                c1.enqueue(data(s as u64, &keyed[*g as usize]), Lane::Normal, 0, 0).unwrap();
            }
            let kgs: BTreeSet<_> = migrating.iter().map(|&g| KeyGroupId(g)).collect();
            let moved = redirect_output_cache(&mut c1, &mut c2, &kgs, k).unwrap();
            let expected_moved = keys.iter().filter(|g| migrating.contains(g)).count();
            proptest::prop_assert_eq!(moved, expected_moved);
            for g in 0..8u32 {
                let want: Vec<u64> = keys.iter().enumerate().filter(|(_, x)| **x == g).map(|(s, _)| s as u64).collect();
                let side = if migrating.contains(&g) { &c2 } else { &c1 };
                let got: Vec<u64> = side.output_cache().iter().filter(|m| m.key.as_deref() == Some(&keyed[g as usize][..])).map(|m| m.seq_id).collect();
                proptest::prop_assert_eq!(want, got);
            }
        }

        /// Per-lane FIFO and priority dominance over whatever is still queued
        /// when the priority message arrives.
        #[test]
        fn lanes_are_fifo_and_priority_dominates(ops in proptest::collection::vec(proptest::bool::ANY, 1..50)) {
            let mut ch = Channel::new(ChannelId(0), InstanceId(0), InstanceId(1), 1000);
            let mut normals = vec![];
            let mut prios = vec![];
            for (i, prio) in ops.iter().enumerate() {
                let seq = i as u64;
                if *prio {
                    ch.enqueue(StreamMessage::trigger(InstanceId(0), seq, SubscaleId(0), 0), Lane::Priority, 0, 1).unwrap();
                    prios.push(seq);
                } else {
                    ch.enqueue(data(seq, b"k"), Lane::Normal, 0, 1).unwrap();
                    normals.push(seq);
                }
            }
            ch.transmit(0, 1);
            let got = drain(&mut ch, 1);
            let mut want = prios.clone();
            want.extend(normals);
            proptest::prop_assert_eq!(got, want);
        }
    }
}
