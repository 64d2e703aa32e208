//! Aligned checkpoints that stay consistent while migrations are in flight,
//! and restore from a completed snapshot.

use std::collections::{BTreeMap, BTreeSet};

use super::engine::{Engine, RunResult, CONTROL};
use super::path::PathItem;
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::graph::OperatorKind;
use crate::ids::{ChannelId, CheckpointId, InstanceId, Key, KeyGroupId, OperatorId, PathId, Tick};
use crate::message::{MessageKind, StreamMessage};
use crate::state::{merge_values, KeyGroupStatus, StateValue};
use crate::trace::{Detail, TraceKind};

/// A data record that was in flight when the snapshot was taken and must
/// be applied on restore.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingRecord {
    pub operator: String,
    pub record: StreamMessage,
}

/// A completed, globally consistent checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub id: CheckpointId,
    pub started_at: Tick,
    pub completed_at: Tick,
    /// Next item index per source stream.
    pub source_offsets: Vec<usize>,
    /// Keyed state per stateful operator name.
    pub state: BTreeMap<String, BTreeMap<Key, StateValue>>,
    pub pending: Vec<PendingRecord>,
}

#[derive(Clone, Debug, Default)]
struct Taint {
    before: BTreeMap<Key, StateValue>,
    log: Vec<StreamMessage>,
}

pub(crate) struct CheckpointRun {
    pub id: CheckpointId,
    started_at: Tick,
    source_offsets: Vec<usize>,
    state: BTreeMap<OperatorId, BTreeMap<Key, StateValue>>,
    pending: Vec<(OperatorId, StreamMessage)>,
    snapshotted: BTreeSet<InstanceId>,
    open_recordings: usize,
    taint: BTreeMap<InstanceId, BTreeMap<KeyGroupId, Taint>>,
}

fn merge_into(into: &mut BTreeMap<Key, StateValue>, entries: &BTreeMap<Key, StateValue>) {
    for (k, v) in entries {
        match into.get_mut(k) {
            Some(existing) => merge_values(existing, v),
            None => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Engine {
    pub(crate) fn start_checkpoint(&mut self, id: CheckpointId) -> Result<()> {
        if let Some(run) = &self.ckpt {
            return Err(Error::DuplicateCheckpoint(run.id));
        }
        let sources: Vec<InstanceId> = self
            .graph
            .sources()
            .flat_map(|o| o.instances.clone())
            .collect();
        let source_offsets = sources
            .iter()
            .map(|s| self.inst[s.index()].source.as_ref().map_or(0, |c| c.next))
            .collect();
        self.ckpt = Some(CheckpointRun {
            id,
            started_at: self.now,
            source_offsets,
            state: BTreeMap::new(),
            pending: Vec::new(),
            snapshotted: sources.iter().copied().collect(),
            open_recordings: 0,
            taint: BTreeMap::new(),
        });
        for s in sources {
            let seq = self.next_control_seq(s);
            self.record(
                s,
                TraceKind::CheckpointInject,
                Some(seq),
                Detail::default().checkpoint(id),
            );
            self.broadcast(s, StreamMessage::checkpoint(s, seq, id, self.now))?;
        }
        self.try_complete_checkpoint()
    }

    /// Whether a checkpoint is in flight that `i` has not yet snapshotted.
    pub(crate) fn checkpoint_pending_at(&self, i: InstanceId) -> bool {
        self.ckpt
            .as_ref()
            .is_some_and(|r| !r.snapshotted.contains(&i))
    }

    fn has_sent_barrier(&self, i: InstanceId) -> bool {
        self.ckpt
            .as_ref()
            .is_some_and(|r| r.snapshotted.contains(&i))
    }

    pub(crate) fn on_checkpoint_barrier(
        &mut self,
        i: InstanceId,
        ch: ChannelId,
        msg: StreamMessage,
    ) -> Result<()> {
        let ck = msg
            .checkpoint_id
            .ok_or_else(|| Error::ProtocolError("barrier without checkpoint id".into()))?;
        if self.ckpt.as_ref().map(|r| r.id) != Some(ck)
            || self.inst[i.index()].snapshotted == Some(ck)
        {
            return Ok(());
        }
        let inst = &mut self.inst[i.index()];
        inst.ckpt_seen.insert(ch);
        inst.ckpt_blocked.insert(ch);
        self.try_align(i)
    }

    /// Snapshots `i` once a barrier was seen on every live input.
    pub(crate) fn try_align(&mut self, i: InstanceId) -> Result<()> {
        let Some(ck) = self.ckpt.as_ref().map(|r| r.id) else {
            return Ok(());
        };
        let inst = &self.inst[i.index()];
        if inst.snapshotted == Some(ck) || inst.kind == OperatorKind::Source || inst.retired {
            return Ok(());
        }
        let aligned = inst
            .inputs
            .iter()
            .filter(|c| !self.inst[self.graph.channel(**c).sender.index()].retired)
            .all(|c| inst.ckpt_seen.contains(c));
        if aligned {
            self.snapshot_instance(i, ck)?;
        }
        Ok(())
    }

    fn snapshot_instance(&mut self, i: InstanceId, ck: CheckpointId) -> Result<()> {
        let op = self.inst[i.index()].op;
        let mut run = self.ckpt.take().expect("checkpoint in flight");
        let taint = run.taint.remove(&i).unwrap_or_default();
        let inst = &mut self.inst[i.index()];
        if inst.kind.is_stateful() {
            let state = run.state.entry(op).or_default();
            for kg in 0..self.graph.num_keygroups {
                let kg = KeyGroupId(kg);
                match inst.store.keygroup_status(kg) {
                    None | Some(KeyGroupStatus::MigratedOut) => continue,
                    _ => {}
                }
                match taint.get(&kg) {
                    Some(t) => merge_into(state, &t.before),
                    None => merge_into(state, inst.store.entries(kg)),
                }
            }
            for t in taint.into_values() {
                run.pending.extend(t.log.into_iter().map(|m| (op, m)));
            }
            for out in inst.out_subs.values() {
                run.pending
                    .extend(out.buffer.iter().map(|m| (op, m.clone().unwrap_rerouted())));
            }
            for sub in inst.in_subs.values() {
                for queue in sub.pending.values() {
                    run.pending.extend(
                        queue
                            .iter()
                            .filter(|(_, post)| !post)
                            .map(|(m, _)| (op, m.clone())),
                    );
                }
            }
        }
        for p in self.paths.iter_mut().filter(|p| p.to == i) {
            if p.after_marker != Some(ck) {
                p.recording = Some(ck);
                run.open_recordings += 1;
            }
        }
        run.snapshotted.insert(i);
        self.ckpt = Some(run);
        let inst = &mut self.inst[i.index()];
        inst.snapshotted = Some(ck);
        inst.ckpt_seen.clear();
        inst.ckpt_blocked.clear();
        self.record(
            i,
            TraceKind::CheckpointSnapshot,
            None,
            Detail::default().checkpoint(ck),
        );
        if self.inst[i.index()].kind != OperatorKind::Sink {
            let seq = self.next_control_seq(i);
            self.broadcast(i, StreamMessage::checkpoint(i, seq, ck, self.now))?;
        }
        let outgoing: Vec<PathId> = self
            .paths
            .iter()
            .filter(|p| p.from == i)
            .map(|p| p.id)
            .collect();
        for p in outgoing {
            self.path_send(p, PathItem::Marker(ck), 0);
        }
        for sub in self.inst[i.index()]
            .deferred_triggers
            .remove(&ck)
            .unwrap_or_default()
        {
            if self.inst[i.index()].out_subs.contains_key(&sub) {
                self.start_migration(i, sub)?;
            }
        }
        self.wake(i, self.now);
        self.try_complete_checkpoint()
    }

    pub(crate) fn on_path_marker(&mut self, p: PathId, ck: CheckpointId) -> Result<()> {
        let path = &mut self.paths[p.index()];
        path.after_marker = Some(ck);
        if path.recording == Some(ck) {
            path.recording = None;
            if let Some(run) = self.ckpt.as_mut().filter(|r| r.id == ck) {
                run.open_recordings -= 1;
            }
            self.try_complete_checkpoint()?;
        }
        Ok(())
    }

    /// Records or taints in-transit migration traffic; returns whether the
    /// message was sent after the sender's snapshot.
    pub(crate) fn observe_path_message(&mut self, p: PathId, m: &StreamMessage) -> bool {
        let Some(run) = self.ckpt.as_mut() else {
            return false;
        };
        let path = &self.paths[p.index()];
        let to = path.to;
        let op = self.inst[to.index()].op;
        let post = path.after_marker == Some(run.id);
        let kg = match m.kind {
            MessageKind::StateChunk => m.chunk_body().map(|c| c.keygroup),
            MessageKind::ReroutedRecord => m
                .key
                .as_deref()
                .map(|k| crate::state::key_to_keygroup(k, self.graph.num_keygroups)),
            _ => None,
        };
        if path.recording == Some(run.id) {
            match m.kind {
                MessageKind::StateChunk => {
                    if let Some(c) = m.chunk_body() {
                        merge_into(run.state.entry(op).or_default(), &c.entries);
                    }
                }
                MessageKind::ReroutedRecord => run.pending.push((op, m.clone().unwrap_rerouted())),
                _ => {}
            }
        }
        if post && !run.snapshotted.contains(&to) {
            if let Some(kg) = kg {
                let store = &self.inst[to.index()].store;
                run.taint
                    .entry(to)
                    .or_default()
                    .entry(kg)
                    .or_insert_with(|| Taint {
                        before: store.entries(kg).clone(),
                        log: Vec::new(),
                    });
            }
        }
        post
    }

    /// Logs a pre-barrier record applied to a tainted key-group.
    pub(crate) fn checkpoint_log(&mut self, i: InstanceId, kg: KeyGroupId, msg: &StreamMessage) {
        if let Some(t) = self
            .ckpt
            .as_mut()
            .and_then(|r| r.taint.get_mut(&i))
            .and_then(|t| t.get_mut(&kg))
        {
            t.log.push(msg.clone());
        }
    }

    pub(crate) fn on_channel_created(&mut self, c: ChannelId) {
        let (s, r) = (self.graph.channel(c).sender, self.graph.channel(c).receiver);
        if self.has_sent_barrier(s) && self.checkpoint_pending_at(r) {
            let inst = &mut self.inst[r.index()];
            inst.ckpt_seen.insert(c);
            inst.ckpt_blocked.insert(c);
        }
    }

    pub(crate) fn on_path_created(&mut self, p: PathId) {
        let from = self.paths[p.index()].from;
        if self.has_sent_barrier(from) {
            let ck = self.ckpt.as_ref().expect("checkpoint").id;
            self.path_send(p, PathItem::Marker(ck), 0);
        }
    }

    fn try_complete_checkpoint(&mut self) -> Result<()> {
        let Some(run) = &self.ckpt else { return Ok(()) };
        let done = run.open_recordings == 0
            && self
                .inst
                .iter()
                .filter(|i| !i.retired && i.kind != OperatorKind::Source)
                .all(|i| run.snapshotted.contains(&i.id));
        if !done {
            return Ok(());
        }
        let run = self.ckpt.take().expect("checkpoint");
        let name = |op: OperatorId| self.graph.operator(op).spec.id.clone();
        let snapshot = Snapshot {
            id: run.id,
            started_at: run.started_at,
            completed_at: self.now,
            source_offsets: run.source_offsets,
            state: run.state.into_iter().map(|(op, s)| (name(op), s)).collect(),
            pending: run
                .pending
                .into_iter()
                .map(|(op, record)| PendingRecord {
                    operator: name(op),
                    record,
                })
                .collect(),
        };
        self.record(
            CONTROL,
            TraceKind::CheckpointComplete,
            None,
            Detail::default()
                .checkpoint(snapshot.id)
                .value(snapshot.pending.len() as i64),
        );
        self.snapshots.push(snapshot);
        Ok(())
    }
}

/// Restarts the job of `cfg` without scaling from `snapshot` and runs it
/// to the end of the workload.
pub fn restore_and_replay(cfg: &SimConfig, snapshot: &Snapshot) -> Result<RunResult> {
    let mut engine = Engine::new(cfg.without_scaling())?;
    let k = engine.graph.num_keygroups;
    let owner_of = |engine: &Engine, op: OperatorId, kg: KeyGroupId| -> InstanceId {
        let n = engine.graph.operator(op).instances.len() as u32;
        engine.graph.operator(op).instances[crate::control::uniform_owner(kg.0, n, k) as usize]
    };
    for (name, entries) in &snapshot.state {
        let op = engine.graph.operator_by_name(name)?;
        for (key, value) in entries {
            let kg = engine.keygroup(key);
            let owner = owner_of(&engine, op, kg);
            engine.inst[owner.index()]
                .store
                .adopt(kg, BTreeMap::from([(key.clone(), value.clone())]));
        }
    }
    for p in &snapshot.pending {
        let op = engine.graph.operator_by_name(&p.operator)?;
        let key = p
            .record
            .key
            .as_deref()
            .ok_or_else(|| Error::MalformedRecord("pending record without key".into()))?;
        let kg = engine.keygroup(key);
        let owner = owner_of(&engine, op, kg);
        engine.apply_record(owner, &p.record, kg, None, Some("restored"))?;
    }
    let sources: Vec<InstanceId> = engine
        .graph
        .sources()
        .flat_map(|o| o.instances.clone())
        .collect();
    if sources.len() != snapshot.source_offsets.len() {
        return Err(Error::Config(
            "snapshot does not match the job's sources".into(),
        ));
    }
    for (s, &offset) in sources.iter().zip(&snapshot.source_offsets) {
        if let Some(c) = engine.inst[s.index()].source.as_mut() {
            c.next = offset;
        }
    }
    engine.run_to_end()
}
