use std::collections::VecDeque;

use crate::ids::{SubscaleId, Tick};
use crate::message::StreamMessage;

/// Source-side buffer of records whose state has migrated out.
#[derive(Clone, Debug)]
pub struct RerouteBuffer {
    pub subscale: SubscaleId,
    queue: VecDeque<StreamMessage>,
    capacity: usize,
    timeout: Tick,
    oldest: Option<Tick>,
}

impl RerouteBuffer {
    pub fn new(subscale: SubscaleId, capacity: usize, timeout: Tick) -> Self {
        RerouteBuffer {
            subscale,
            queue: VecDeque::new(),
            capacity: capacity.max(1),
            timeout,
            oldest: None,
        }
    }

    /// Buffers a data record. Returns the flushed batch when the buffer
    /// reached capacity.
    pub fn push(&mut self, record: StreamMessage, now: Tick) -> Option<Vec<StreamMessage>> {
        self.oldest.get_or_insert(now);
        self.queue
            .push_back(StreamMessage::rerouted(record, self.subscale));
        (self.queue.len() >= self.capacity).then(|| self.flush())
    }

    /// Tick at which the buffered records must leave by timeout.
    pub fn deadline(&self) -> Option<Tick> {
        self.oldest.map(|t| t + self.timeout)
    }

    pub fn flush(&mut self) -> Vec<StreamMessage> {
        self.oldest = None;
        self.queue.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StreamMessage> {
        self.queue.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;
    use crate::message::MessageKind;

    fn rec(seq: u64) -> StreamMessage {
        StreamMessage::data(InstanceId(0), seq, b"k".to_vec(), 1, 0)
    }

    #[test]
    fn flushes_whole_buffer_at_capacity_in_fifo_order() {
        let mut b = RerouteBuffer::new(SubscaleId(2), 3, 10);
        assert!(b.push(rec(1), 0).is_none());
        assert!(b.push(rec(2), 1).is_none());
        let out = b.push(rec(3), 2).unwrap();
        assert_eq!(
            out.iter().map(|m| m.seq_id).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(out.iter().all(|m| m.kind == MessageKind::ReroutedRecord));
        assert!(b.is_empty() && b.deadline().is_none());
    }

    #[test]
    fn deadline_tracks_oldest_record() {
        let mut b = RerouteBuffer::new(SubscaleId(0), 8, 5);
        b.push(rec(1), 3);
        b.push(rec(2), 6);
        assert_eq!(b.deadline(), Some(8));
    }
}
