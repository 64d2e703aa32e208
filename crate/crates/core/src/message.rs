//! Messages that travel on channels and migration paths.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{CheckpointId, InstanceId, Key, SeqId, SubscaleId, Tick};
use crate::state::StateChunk;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Data,
    Watermark,
    LatencyMarker,
    TriggerBarrier,
    ConfirmBarrier,
    CheckpointBarrier,
    StateChunk,
    ReroutedRecord,
    ReroutedConfirm,
}

impl MessageKind {
    pub fn is_barrier(self) -> bool {
        matches!(
            self,
            MessageKind::TriggerBarrier
                | MessageKind::ConfirmBarrier
                | MessageKind::CheckpointBarrier
        )
    }

    /// Signals that intra-channel scheduling must never move a record across.
    pub fn is_time_signal(self) -> bool {
        self == MessageKind::Watermark
    }

    fn carries_key(self) -> bool {
        matches!(self, MessageKind::Data | MessageKind::ReroutedRecord)
    }

    fn carries_subscale(self) -> bool {
        matches!(
            self,
            MessageKind::TriggerBarrier
                | MessageKind::ConfirmBarrier
                | MessageKind::StateChunk
                | MessageKind::ReroutedRecord
                | MessageKind::ReroutedConfirm
        )
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum Payload {
    #[default]
    Empty,
    Bytes(Vec<u8>),
    Chunk(Arc<StateChunk>),
}

impl Payload {
    pub fn int(v: i64) -> Self {
        Payload::Bytes(v.to_le_bytes().to_vec())
    }

    /// Integer fast path: the first eight bytes, little endian.
    pub fn as_int(&self) -> Result<i64> {
        match self {
            Payload::Bytes(b) if b.len() >= 8 => {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&b[..8]);
                Ok(i64::from_le_bytes(buf))
            }
            Payload::Bytes(b) => Err(Error::MalformedRecord(format!(
                "payload has {} bytes, need 8",
                b.len()
            ))),
            _ => Err(Error::MalformedRecord(
                "payload is not a byte string".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamMessage {
    pub kind: MessageKind,
    pub key: Option<Key>,
    pub payload: Payload,
    pub event_time: Tick,
    pub seq_id: SeqId,
    pub subscale_id: Option<SubscaleId>,
    pub checkpoint_id: Option<CheckpointId>,
    /// The instance that originally produced the message. For rerouted
    /// records and confirms this is the predecessor whose channel they
    /// belong to.
    pub origin: InstanceId,
}

impl StreamMessage {
    fn bare(kind: MessageKind, origin: InstanceId, seq_id: SeqId, event_time: Tick) -> Self {
        StreamMessage {
            kind,
            key: None,
            payload: Payload::Empty,
            event_time,
            seq_id,
            subscale_id: None,
            checkpoint_id: None,
            origin,
        }
    }

    pub fn data(origin: InstanceId, seq_id: SeqId, key: Key, value: i64, event_time: Tick) -> Self {
        StreamMessage {
            key: Some(key),
            payload: Payload::int(value),
            ..Self::bare(MessageKind::Data, origin, seq_id, event_time)
        }
    }

    pub fn watermark(origin: InstanceId, seq_id: SeqId, time: Tick) -> Self {
        Self::bare(MessageKind::Watermark, origin, seq_id, time)
    }

    /// `emitted_at` is the marker's generation tick.
    pub fn marker(origin: InstanceId, seq_id: SeqId, emitted_at: Tick) -> Self {
        Self::bare(MessageKind::LatencyMarker, origin, seq_id, emitted_at)
    }

    pub fn trigger(origin: InstanceId, seq_id: SeqId, subscale: SubscaleId, now: Tick) -> Self {
        StreamMessage {
            subscale_id: Some(subscale),
            ..Self::bare(MessageKind::TriggerBarrier, origin, seq_id, now)
        }
    }

    pub fn confirm(origin: InstanceId, seq_id: SeqId, subscale: SubscaleId, now: Tick) -> Self {
        StreamMessage {
            subscale_id: Some(subscale),
            ..Self::bare(MessageKind::ConfirmBarrier, origin, seq_id, now)
        }
    }

    pub fn checkpoint(origin: InstanceId, seq_id: SeqId, id: CheckpointId, now: Tick) -> Self {
        StreamMessage {
            checkpoint_id: Some(id),
            ..Self::bare(MessageKind::CheckpointBarrier, origin, seq_id, now)
        }
    }

    pub fn chunk(origin: InstanceId, seq_id: SeqId, chunk: StateChunk, now: Tick) -> Self {
        StreamMessage {
            subscale_id: Some(chunk.subscale_id),
            payload: Payload::Chunk(Arc::new(chunk)),
            ..Self::bare(MessageKind::StateChunk, origin, seq_id, now)
        }
    }

    /// Wraps a data record for transport along a migration path.
    pub fn rerouted(record: StreamMessage, subscale: SubscaleId) -> Self {
        debug_assert_eq!(record.kind, MessageKind::Data);
        StreamMessage {
            kind: MessageKind::ReroutedRecord,
            subscale_id: Some(subscale),
            ..record
        }
    }

    /// Unwraps a rerouted record back into the data record it carries.
    pub fn unwrap_rerouted(self) -> StreamMessage {
        StreamMessage {
            kind: MessageKind::Data,
            subscale_id: None,
            ..self
        }
    }

    pub fn rerouted_confirm(
        channel: InstanceId,
        seq_id: SeqId,
        subscale: SubscaleId,
        now: Tick,
    ) -> Self {
        StreamMessage {
            subscale_id: Some(subscale),
            ..Self::bare(MessageKind::ReroutedConfirm, channel, seq_id, now)
        }
    }

    pub fn chunk_body(&self) -> Option<&StateChunk> {
        match &self.payload {
            Payload::Chunk(c) => Some(c),
            _ => None,
        }
    }

    /// Checks the field-presence invariants tied to `kind`.
    pub fn validate(&self) -> Result<()> {
        if self.kind.carries_key() != self.key.is_some() {
            return Err(Error::ProtocolError(format!(
                "{:?} message key presence is wrong",
                self.kind
            )));
        }
        if self.kind.carries_subscale() != self.subscale_id.is_some() {
            return Err(Error::ProtocolError(format!(
                "{:?} message subscale presence is wrong",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_respect_presence_invariants() {
        let o = InstanceId(0);
        let msgs = [
            StreamMessage::data(o, 1, b"k".to_vec(), 3, 0),
            StreamMessage::watermark(o, 2, 5),
            StreamMessage::marker(o, 3, 5),
            StreamMessage::trigger(o, 4, SubscaleId(1), 0),
            StreamMessage::confirm(o, 5, SubscaleId(1), 0),
            StreamMessage::checkpoint(o, 6, 1, 0),
            StreamMessage::rerouted(
                StreamMessage::data(o, 7, b"k".to_vec(), 1, 0),
                SubscaleId(2),
            ),
            StreamMessage::rerouted_confirm(o, 8, SubscaleId(2), 0),
        ];
        for m in &msgs {
            m.validate().unwrap();
        }
        let mut bad = StreamMessage::watermark(o, 9, 1);
        bad.key = Some(b"x".to_vec());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn int_payload_round_trips_and_rejects_short() {
        assert_eq!(Payload::int(-42).as_int().unwrap(), -42);
        assert!(matches!(
            Payload::Bytes(vec![1, 2]).as_int(),
            Err(Error::MalformedRecord(_))
        ));
    }

    #[test]
    fn rerouting_preserves_identity() {
        let rec = StreamMessage::data(InstanceId(3), 77, b"a".to_vec(), 9, 4);
        let wrapped = StreamMessage::rerouted(rec.clone(), SubscaleId(0));
        assert_eq!(wrapped.seq_id, 77);
        assert_eq!(wrapped.unwrap_rerouted(), rec);
    }
}
