//! Append-only event trace, written as JSON lines.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{InstanceId, SeqId, Tick};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Emit,
    Process,
    Deliver,
    SinkMarker,
    SinkOutput,
    Reroute,
    ReroutedApply,
    Redirect,
    Trigger,
    Confirm,
    ReroutedConfirm,
    Chunk,
    ChunkInstall,
    EpochFlip,
    Activate,
    SuspendBegin,
    SuspendEnd,
    Inject,
    SubscaleComplete,
    SessionStart,
    SessionEnd,
    SessionTerminated,
    Deploy,
    CheckpointInject,
    CheckpointSnapshot,
    CheckpointComplete,
    CheckpointFuse,
    FetchRequest,
    FetchTransfer,
    RestartStop,
    RestartResume,
    StaleTrigger,
    ProtocolError,
}

impl TraceKind {
    /// Kinds emitted only while a scaling protocol is active.
    pub fn is_protocol(self) -> bool {
        matches!(
            self,
            TraceKind::Trigger
                | TraceKind::Confirm
                | TraceKind::ReroutedConfirm
                | TraceKind::Chunk
                | TraceKind::Reroute
                | TraceKind::EpochFlip
                | TraceKind::SuspendBegin
                | TraceKind::SuspendEnd
                | TraceKind::Activate
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detail {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub channel: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pos: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kg: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subscale: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peer: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl Detail {
    pub fn kg(mut self, kg: u32) -> Self {
        self.kg = Some(kg);
        self
    }
    pub fn subscale(mut self, s: u32) -> Self {
        self.subscale = Some(s);
        self
    }
    pub fn peer(mut self, p: InstanceId) -> Self {
        self.peer = Some(p.0);
        self
    }
    pub fn from(mut self, p: InstanceId) -> Self {
        self.from = Some(p.0);
        self
    }
    pub fn value(mut self, v: i64) -> Self {
        self.value = Some(v);
        self
    }
    pub fn note(mut self, n: impl Into<String>) -> Self {
        self.note = Some(n.into());
        self
    }
    pub fn channel(mut self, c: u32, pos: u64) -> Self {
        self.channel = Some(c);
        self.pos = Some(pos);
        self
    }
    pub fn key(mut self, k: &[u8]) -> Self {
        self.key = Some(String::from_utf8_lossy(k).into_owned());
        self
    }
    pub fn checkpoint(mut self, id: u64) -> Self {
        self.checkpoint = Some(id);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: Tick,
    pub instance: u32,
    pub kind: TraceKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seq_id: Option<SeqId>,
    pub detail: Detail,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn record(
        &mut self,
        tick: Tick,
        instance: InstanceId,
        kind: TraceKind,
        seq_id: Option<SeqId>,
        detail: Detail,
    ) {
        self.events.push(TraceEvent {
            tick,
            instance: instance.0,
            kind,
            seq_id,
            detail,
        });
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut events = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| Error::Io(e.to_string()))?);
        }
        Ok(Trace { events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::default();
        t.record(
            3,
            InstanceId(1),
            TraceKind::Process,
            Some(9),
            Detail::default().channel(2, 5).key(b"k1"),
        );
        t.record(
            4,
            InstanceId(2),
            TraceKind::Trigger,
            None,
            Detail::default().subscale(0),
        );
        let bytes = t.to_jsonl_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"kind\":\"process\""));
        assert_eq!(Trace::read_jsonl(bytes.as_slice()).unwrap(), t);
    }
}
