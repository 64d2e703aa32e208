//! Decoupled rescaling: trigger/confirm injection, chunked migration with
//! record rerouting, and implicit alignment at the target.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::engine::{Engine, Event, Gate, InSub, OutSub};
use super::path::PathItem;
use crate::channel::redirect_output_cache_from;
use crate::error::{Error, Result};
use crate::ids::{ChannelId, InstanceId, KeyGroupId, PathId, SubscaleId};
use crate::message::{MessageKind, StreamMessage};
use crate::protocol::{
    merge_with_checkpoint, EpochTable, InjectionPlan, RerouteBuffer, Subscale, SubscalePhase,
};
use crate::state::KeyGroupStatus;
use crate::trace::{Detail, TraceKind};

impl Engine {
    pub(crate) fn inject_subscale(&mut self, sid: usize, sub: Subscale) -> Result<()> {
        let op = self.coord.sessions[sid].operator;
        self.coord.sessions[sid].mark(sub.id, SubscalePhase::Triggered, self.now);
        self.record(
            sub.source,
            TraceKind::Inject,
            None,
            Detail::default()
                .subscale(sub.id.0)
                .peer(sub.target)
                .value(sub.keygroups.len() as i64),
        );
        let preds: Vec<InstanceId> = self
            .graph
            .predecessors(op)
            .into_iter()
            .filter(|p| !self.inst[p.index()].retired)
            .collect();
        self.prepare_target(
            sub.target,
            &sub,
            Gate::Epochs(EpochTable::new(sub.id, preds.iter().copied())),
        )?;
        self.prepare_source(&sub);

        let (s, t) = (sub.source, sub.target);
        let source_pending_ckpt = self.checkpoint_pending_at(s);
        let mut plans = Vec::new();
        for &p in &preds {
            let ch = self.channel_to(p, s);
            let plan = if source_pending_ckpt {
                merge_with_checkpoint(self.graph.channel(ch))
            } else {
                InjectionPlan::Plain
            };
            plans.push((p, ch, plan));
        }
        let fused = plans
            .iter()
            .any(|(_, _, plan)| *plan != InjectionPlan::Plain);
        let k = self.graph.num_keygroups;
        let reassign: BTreeMap<KeyGroupId, InstanceId> =
            sub.keygroups.iter().map(|&kg| (kg, t)).collect();
        for (p, ch_s, plan) in plans {
            self.graph
                .routing_table_mut(p, op)
                .ok_or_else(|| Error::ProtocolError(format!("{p} has no routing table")))?
                .apply_route_update(&reassign)?;
            let ch_t = self.channel_to(p, t);
            let confirm_seq = self.next_control_seq(p);
            let confirm = StreamMessage::confirm(p, confirm_seq, sub.id, self.now);
            let from = match plan {
                InjectionPlan::Fused { barrier } => barrier + 1,
                _ => 0,
            };
            let (old, new) = self.graph.channel_pair_mut(ch_s, ch_t);
            let moved = redirect_output_cache_from(old, new, &sub.keygroups, k, from)?;
            match plan {
                InjectionPlan::Plain => {
                    self.graph.channel_mut(ch_s).push_cache_front(confirm);
                    if !fused {
                        let seq = self.next_control_seq(p);
                        self.send_priority(ch_s, StreamMessage::trigger(p, seq, sub.id, self.now))?;
                    }
                }
                InjectionPlan::Fused { barrier } => {
                    let seq = self.next_control_seq(p);
                    let trigger = StreamMessage::trigger(p, seq, sub.id, self.now);
                    let channel = self.graph.channel_mut(ch_s);
                    channel.insert_cache_after(barrier, confirm);
                    channel.insert_cache_after(barrier, trigger);
                    self.record(
                        p,
                        TraceKind::CheckpointFuse,
                        None,
                        Detail::default().subscale(sub.id.0),
                    );
                }
                InjectionPlan::Integrated => {
                    self.graph.channel_mut(ch_s).push_cache_front(confirm);
                    let ck = self.ckpt.as_ref().map(|c| c.id).unwrap_or_default();
                    let deferred = self.inst[s.index()]
                        .deferred_triggers
                        .entry(ck)
                        .or_default();
                    if !deferred.contains(&sub.id) {
                        deferred.push(sub.id);
                    }
                }
            }
            self.record(
                p,
                TraceKind::Redirect,
                None,
                Detail::default()
                    .subscale(sub.id.0)
                    .peer(t)
                    .value(moved as i64),
            );
            self.transmit(ch_s);
            self.transmit(ch_t);
        }
        Ok(())
    }

    /// Registers the incoming side of `sub` at `t`.
    pub(crate) fn prepare_target(
        &mut self,
        t: InstanceId,
        sub: &Subscale,
        gate: Gate,
    ) -> Result<()> {
        let inst = &mut self.inst[t.index()];
        for &kg in &sub.keygroups {
            inst.store.expect_incoming(kg)?;
            inst.incoming.insert(kg, sub.id);
        }
        inst.in_subs.insert(
            sub.id,
            InSub {
                keygroups: sub.keygroups.clone(),
                installed: BTreeSet::new(),
                pending: BTreeMap::new(),
                gate,
            },
        );
        Ok(())
    }

    pub(crate) fn prepare_source(&mut self, sub: &Subscale) -> PathId {
        let path = self.get_or_create_path(sub.source, sub.target, sub.id.0);
        let m = &self.cfg.migration;
        let buffer = RerouteBuffer::new(sub.id, m.reroute_capacity, m.reroute_timeout);
        self.inst[sub.source.index()].out_subs.insert(
            sub.id,
            OutSub {
                keygroups: sub.keygroups.clone(),
                target: sub.target,
                path,
                remaining: VecDeque::new(),
                buffer,
                started: false,
                reroutes: true,
            },
        );
        path
    }

    pub(crate) fn on_trigger(&mut self, i: InstanceId, msg: StreamMessage) -> Result<()> {
        let sub = msg
            .subscale_id
            .ok_or_else(|| Error::ProtocolError("trigger without subscale".into()))?;
        match self.inst[i.index()].out_subs.get(&sub) {
            None => {
                self.record(
                    i,
                    TraceKind::StaleTrigger,
                    Some(msg.seq_id),
                    Detail::default().subscale(sub.0),
                );
                Ok(())
            }
            Some(o) if o.started => Ok(()),
            Some(_) => self.start_migration(i, sub),
        }
    }

    /// Source side begins streaming the chunks of `sub`.
    pub(crate) fn start_migration(&mut self, i: InstanceId, sub: SubscaleId) -> Result<()> {
        let inst = &mut self.inst[i.index()];
        let out = inst
            .out_subs
            .get_mut(&sub)
            .ok_or_else(|| Error::ProtocolError(format!("{i} does not migrate subscale {sub}")))?;
        if out.started {
            return Ok(());
        }
        out.started = true;
        out.remaining = out.keygroups.iter().copied().collect();
        let kgs = out.keygroups.clone();
        inst.store.begin_migration(&kgs)?;
        inst.busy_until = inst.busy_until.max(self.now) + self.cfg.migration.trigger_ticks;
        self.record(
            i,
            TraceKind::Trigger,
            None,
            Detail::default().subscale(sub.0),
        );
        if let Some(&sid) = self.coord.sub_session.get(&sub) {
            self.coord.sessions[sid].mark(sub, SubscalePhase::Migrating, self.now);
        }
        self.emit_next_chunk(i, sub)
    }

    /// Sends the next chunk of `sub` if the link is free, otherwise waits
    /// for it.
    pub(crate) fn emit_next_chunk(&mut self, i: InstanceId, sub: SubscaleId) -> Result<()> {
        let Some(out) = self.inst[i.index()].out_subs.get(&sub) else {
            return Ok(());
        };
        let path = out.path;
        let target = out.target;
        if out.remaining.is_empty() {
            return Ok(());
        }
        let free = self.paths[path.index()].link_free;
        if free > self.now {
            self.clock.schedule(free, i, Event::ChunkEmit(sub));
            return Ok(());
        }
        let inst = &mut self.inst[i.index()];
        let kg = inst
            .out_subs
            .get_mut(&sub)
            .and_then(|o| o.remaining.pop_front())
            .expect("remaining");
        let chunk = inst.store.emit_chunk(kg, sub, i, target)?;
        let size = self.chunk_ticks(&chunk.entries);
        let seq = self.next_control_seq(i);
        let msg = StreamMessage::chunk(i, seq, chunk, self.now);
        self.record(
            i,
            TraceKind::Chunk,
            Some(seq),
            Detail::default()
                .subscale(sub.0)
                .kg(kg.0)
                .peer(target)
                .value(size as i64),
        );
        self.path_send(path, PathItem::Msg(msg), size);
        let more = self.inst[i.index()]
            .out_subs
            .get(&sub)
            .is_some_and(|o| !o.remaining.is_empty());
        if more {
            let free = self.paths[path.index()].link_free;
            self.clock.schedule(free, i, Event::ChunkEmit(sub));
        }
        Ok(())
    }

    pub(crate) fn is_rerouting(&self, i: InstanceId, kg: KeyGroupId) -> bool {
        self.inst[i.index()]
            .out_subs
            .values()
            .any(|o| o.reroutes && o.keygroups.contains(&kg))
    }

    /// Buffers a record whose state already left for the target.
    pub(crate) fn reroute(
        &mut self,
        i: InstanceId,
        msg: StreamMessage,
        kg: KeyGroupId,
    ) -> Result<()> {
        let now = self.now;
        let seq = msg.seq_id;
        let (sub, batch, first, target) = {
            let (sub, out) = self.inst[i.index()]
                .out_subs
                .iter_mut()
                .find(|(_, o)| o.keygroups.contains(&kg))
                .ok_or(Error::NotMigrated(kg))?;
            let first = out.buffer.is_empty();
            (*sub, out.buffer.push(msg, now), first, out.target)
        };
        self.record(
            i,
            TraceKind::Reroute,
            Some(seq),
            Detail::default().subscale(sub.0).kg(kg.0).peer(target),
        );
        match batch {
            Some(b) => self.send_rerouted(i, sub, b),
            None if first => {
                let at = now + self.cfg.migration.reroute_timeout;
                self.clock.schedule(at, i, Event::RerouteTimeout(sub));
            }
            None => {}
        }
        Ok(())
    }

    pub(crate) fn on_reroute_timeout(&mut self, i: InstanceId, sub: SubscaleId) -> Result<()> {
        let Some(out) = self.inst[i.index()].out_subs.get_mut(&sub) else {
            return Ok(());
        };
        match out.buffer.deadline() {
            Some(d) if d <= self.now => {
                let batch = out.buffer.flush();
                self.send_rerouted(i, sub, batch);
            }
            Some(d) => self.clock.schedule(d, i, Event::RerouteTimeout(sub)),
            None => {}
        }
        Ok(())
    }

    fn send_rerouted(&mut self, i: InstanceId, sub: SubscaleId, batch: Vec<StreamMessage>) {
        let path = self.inst[i.index()].out_subs[&sub].path;
        for m in batch {
            self.path_send(path, PathItem::Msg(m), 0);
        }
    }

    /// Confirm barrier of predecessor channel `ch` at the subscale source.
    pub(crate) fn on_confirm(
        &mut self,
        i: InstanceId,
        ch: ChannelId,
        msg: StreamMessage,
    ) -> Result<()> {
        let sub = msg
            .subscale_id
            .ok_or_else(|| Error::ProtocolError("confirm without subscale".into()))?;
        let pred = self.graph.channel(ch).sender;
        let Some(out) = self.inst[i.index()].out_subs.get_mut(&sub) else {
            return Err(Error::ProtocolError(format!(
                "{i} got confirm for unknown subscale {sub}"
            )));
        };
        let path = out.path;
        let batch = out.buffer.flush();
        self.send_rerouted(i, sub, batch);
        let seq = self.next_control_seq(i);
        let rc = StreamMessage::rerouted_confirm(pred, seq, sub, self.now);
        self.path_send(path, PathItem::Msg(rc), 0);
        self.record(
            i,
            TraceKind::Confirm,
            Some(msg.seq_id),
            Detail::default().subscale(sub.0).from(pred),
        );
        Ok(())
    }

    pub(crate) fn on_path_arrive(&mut self, p: PathId) -> Result<()> {
        let to = self.paths[p.index()].to;
        while self.paths[p.index()].has_arrived(self.now) {
            let (_, item) = self.paths[p.index()]
                .queue
                .pop_front()
                .expect("arrived item");
            self.on_path_item(p, item)?;
        }
        self.wake(to, self.now);
        Ok(())
    }

    fn on_path_item(&mut self, p: PathId, item: PathItem) -> Result<()> {
        let (from, to) = (self.paths[p.index()].from, self.paths[p.index()].to);
        match item {
            PathItem::Marker(ck) => self.on_path_marker(p, ck),
            PathItem::Msg(m) => {
                let post = self.observe_path_message(p, &m);
                match m.kind {
                    MessageKind::StateChunk => self.on_chunk(to, m),
                    MessageKind::ReroutedRecord => self.on_rerouted(to, m, post),
                    MessageKind::ReroutedConfirm => self.on_rerouted_confirm(to, m),
                    other => Err(Error::ProtocolError(format!(
                        "{other:?} on a migration path"
                    ))),
                }
            }
            PathItem::Fetch { kg, sub, requester } => self.fod_on_fetch(to, kg, sub, requester),
            PathItem::Fetched { chunk, sub } => self.fod_on_fetched(to, from, chunk, sub),
            PathItem::Drained {
                source,
                channel,
                sync,
            } => self.fod_on_drained(to, source, channel, sync),
        }
    }

    fn on_chunk(&mut self, t: InstanceId, msg: StreamMessage) -> Result<()> {
        let chunk = msg
            .chunk_body()
            .ok_or_else(|| Error::ProtocolError("chunk without body".into()))?;
        let (sub, kg) = (chunk.subscale_id, chunk.keygroup);
        let inst = &mut self.inst[t.index()];
        if !inst.in_subs.contains_key(&sub) {
            return Err(Error::UnexpectedChunk(kg));
        }
        inst.store.install_chunk(chunk)?;
        let in_sub = inst.in_subs.get_mut(&sub).expect("in_sub");
        in_sub.installed.insert(kg);
        let fluid = inst.sched.inter_channel;
        let gate = in_sub.gate.clone();
        self.record(
            t,
            TraceKind::ChunkInstall,
            Some(msg.seq_id),
            Detail::default().subscale(sub.0).kg(kg.0).from(msg.origin),
        );
        match gate {
            Gate::Epochs(table) => {
                if table.is_aligned() {
                    self.activate_keygroup(t, sub, kg)?;
                } else if fluid {
                    self.flush_pending(t, sub, kg)?;
                }
            }
            Gate::Universal => self.activate_keygroup(t, sub, kg)?,
            Gate::Sync { .. } => self.sync_on_install(t, sub)?,
        }
        self.check_in_sub(t, sub)
    }

    fn on_rerouted(&mut self, t: InstanceId, msg: StreamMessage, post_marker: bool) -> Result<()> {
        let sub = msg
            .subscale_id
            .ok_or_else(|| Error::ProtocolError("rerouted record without subscale".into()))?;
        let record = msg.unwrap_rerouted();
        let kg = self.keygroup(record.key.as_deref().unwrap_or_default());
        let inst = &self.inst[t.index()];
        let status = inst.store.keygroup_status(kg);
        let in_sub = inst.in_subs.get(&sub).ok_or_else(|| {
            Error::ProtocolError(format!(
                "{t} got rerouted record for unknown subscale {sub}"
            ))
        })?;
        let installed = in_sub.installed.contains(&kg);
        let queued = in_sub.pending.get(&kg).is_some_and(|q| !q.is_empty());
        let apply = installed
            && !queued
            && (inst.sched.inter_channel || status == Some(KeyGroupStatus::Active));
        if apply {
            self.apply_rerouted(t, &record, kg, post_marker)
        } else {
            self.inst[t.index()]
                .in_subs
                .get_mut(&sub)
                .expect("in_sub")
                .pending
                .entry(kg)
                .or_default()
                .push_back((record, post_marker));
            Ok(())
        }
    }

    fn apply_rerouted(
        &mut self,
        t: InstanceId,
        record: &StreamMessage,
        kg: KeyGroupId,
        post_marker: bool,
    ) -> Result<()> {
        if !post_marker {
            self.checkpoint_log(t, kg, record);
        }
        self.apply_record(t, record, kg, None, Some("rerouted"))?;
        self.record(
            t,
            TraceKind::ReroutedApply,
            Some(record.seq_id),
            Detail::default().kg(kg.0),
        );
        let inst = &mut self.inst[t.index()];
        inst.busy_until = inst.busy_until.max(self.now) + self.cfg.runtime.record_cost;
        Ok(())
    }

    fn on_rerouted_confirm(&mut self, t: InstanceId, msg: StreamMessage) -> Result<()> {
        let sub = msg
            .subscale_id
            .ok_or_else(|| Error::ProtocolError("confirm without subscale".into()))?;
        let pred = msg.origin;
        let in_sub = self.inst[t.index()].in_subs.get_mut(&sub).ok_or_else(|| {
            Error::ProtocolError(format!("{t} got confirm for unknown subscale {sub}"))
        })?;
        let Gate::Epochs(table) = &mut in_sub.gate else {
            return Err(Error::ProtocolError(format!(
                "subscale {sub} has no epoch table"
            )));
        };
        let aligned = table.confirm(pred)?;
        self.record(
            t,
            TraceKind::EpochFlip,
            Some(msg.seq_id),
            Detail::default().subscale(sub.0).from(pred),
        );
        if aligned {
            let installed: Vec<_> = self.inst[t.index()].in_subs[&sub]
                .installed
                .iter()
                .copied()
                .collect();
            for kg in installed {
                if self.inst[t.index()].store.keygroup_status(kg)
                    == Some(KeyGroupStatus::InactiveArrived)
                {
                    self.activate_keygroup(t, sub, kg)?;
                }
            }
        }
        self.check_in_sub(t, sub)
    }

    pub(crate) fn activate_keygroup(
        &mut self,
        t: InstanceId,
        sub: SubscaleId,
        kg: KeyGroupId,
    ) -> Result<()> {
        self.inst[t.index()].store.activate(kg)?;
        self.record(
            t,
            TraceKind::Activate,
            None,
            Detail::default().subscale(sub.0).kg(kg.0),
        );
        self.flush_pending(t, sub, kg)
    }

    /// Applies rerouted records held for `kg` in arrival order.
    fn flush_pending(&mut self, t: InstanceId, sub: SubscaleId, kg: KeyGroupId) -> Result<()> {
        let queue = self.inst[t.index()]
            .in_subs
            .get_mut(&sub)
            .and_then(|s| s.pending.remove(&kg))
            .unwrap_or_default();
        for (record, post_marker) in queue {
            self.apply_rerouted(t, &record, kg, post_marker)?;
        }
        Ok(())
    }

    /// Completes `sub` at `t` once its gate allows.
    pub(crate) fn check_in_sub(&mut self, t: InstanceId, sub: SubscaleId) -> Result<()> {
        let Some(s) = self.inst[t.index()].in_subs.get(&sub) else {
            return Ok(());
        };
        let installed = s.installed.len() == s.keygroups.len();
        match &s.gate {
            Gate::Epochs(table) => {
                if installed && table.is_aligned() {
                    self.complete_subscale(sub)?;
                }
                Ok(())
            }
            _ => self.baseline_progress(sub),
        }
    }
}
