//! Comparison protocols: coupled barrier alignment (fluid and all-at-once),
//! unbound routing switch, fetch-on-demand and stop-and-restart.

use std::collections::{BTreeMap, BTreeSet};

use super::engine::{Engine, Event, Gate, CONTROL};
use super::path::PathItem;
use crate::error::{Error, Result};
use crate::ids::{ChannelId, InstanceId, KeyGroupId, SubscaleId};
use crate::message::StreamMessage;
use crate::protocol::{ProtocolChoice, SubscalePhase};
use crate::state::{sub_keygroup, KeyGroupStatus, StateChunk};
use crate::trace::{Detail, TraceKind};

/// Tag of fetch-on-demand paths.
const FETCH_TAG: u32 = u32::MAX;

/// Barrier alignment state of one instance during a coupled session.
#[derive(Clone, Debug)]
pub(crate) struct SyncState {
    pub id: SubscaleId,
    pub session: usize,
    /// Predecessors whose barrier has not been seen yet.
    pub pending: BTreeSet<InstanceId>,
    pub aligned: bool,
    /// The barrier only marks the end of pre-switch records (fetch-on-demand).
    pub end_of_epoch: bool,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct FodInstance {
    /// Sub-key-groups that arrived since this instance last took a record.
    pub pinned: BTreeSet<(KeyGroupId, u32)>,
}

#[derive(Clone, Debug)]
pub(crate) struct FodSession {
    pub session: usize,
    pub sync: SubscaleId,
    pub fanout: u32,
    pub preds: Vec<InstanceId>,
    /// `(source, target)` of every migrating key-group.
    pub pairs: BTreeMap<KeyGroupId, (InstanceId, InstanceId)>,
    pub holder: BTreeMap<(KeyGroupId, u32), InstanceId>,
    /// Destination of sub-key-groups on the wire.
    pub in_transit: BTreeMap<(KeyGroupId, u32), InstanceId>,
    /// Requests queued at the holder.
    pub waiting: BTreeMap<(KeyGroupId, u32), Vec<InstanceId>>,
    pub requested: BTreeSet<(InstanceId, KeyGroupId, u32)>,
    /// `(target, source, predecessor)` drain notices delivered.
    pub drained: BTreeSet<(InstanceId, InstanceId, InstanceId)>,
    pub source_drained: BTreeMap<InstanceId, BTreeSet<InstanceId>>,
    pub transfers: BTreeMap<(KeyGroupId, u32), u32>,
}

impl Engine {
    fn session_predecessors(&self, sid: usize) -> Vec<InstanceId> {
        let op = self.coord.sessions[sid].operator;
        self.graph
            .predecessors(op)
            .into_iter()
            .filter(|p| !self.inst[p.index()].retired)
            .collect()
    }

    fn fresh_sync_id(&mut self) -> SubscaleId {
        let id = SubscaleId(self.coord.next_subscale_id);
        self.coord.next_subscale_id += 1;
        id
    }

    fn switch_routing(&mut self, sid: usize, preds: &[InstanceId]) -> Result<()> {
        let op = self.coord.sessions[sid].operator;
        let reassign = self.coord.sessions[sid].plan.reassignments();
        for &p in preds {
            self.graph
                .routing_table_mut(p, op)
                .ok_or_else(|| Error::ProtocolError(format!("{p} has no routing table")))?
                .apply_route_update(&reassign)?;
        }
        Ok(())
    }

    fn trace_injections(&mut self, sid: usize) {
        for sub in self.coord.sessions[sid].plan.subscales.clone() {
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
        }
    }

    // ---- coupled barrier alignment ---------------------------------------

    pub(crate) fn start_sync_session(&mut self, sid: usize) -> Result<()> {
        let batch = self.coord.sessions[sid].protocol == ProtocolChoice::AllAtOnce;
        let sync = self.fresh_sync_id();
        let preds = self.session_predecessors(sid);
        self.trace_injections(sid);
        let subs = self.coord.sessions[sid].plan.subscales.clone();
        let mut scaling: BTreeSet<InstanceId> = BTreeSet::new();
        for sub in &subs {
            self.prepare_target(sub.target, sub, Gate::Sync { batch })?;
            self.prepare_source(sub);
            scaling.insert(sub.source);
            scaling.insert(sub.target);
        }
        for &x in &scaling {
            self.inst[x.index()].sync = Some(SyncState {
                id: sync,
                session: sid,
                pending: preds.iter().copied().collect(),
                aligned: false,
                end_of_epoch: false,
            });
        }
        for &p in &preds {
            for &x in &scaling {
                let seq = self.next_control_seq(p);
                self.send(p, x, StreamMessage::confirm(p, seq, sync, self.now))?;
            }
        }
        self.switch_routing(sid, &preds)
    }

    pub(crate) fn on_sync_barrier(
        &mut self,
        i: InstanceId,
        ch: ChannelId,
        msg: StreamMessage,
    ) -> Result<()> {
        let pred = self.graph.channel(ch).sender;
        let state = self.inst[i.index()].sync.as_mut().expect("sync state");
        if !state.pending.remove(&pred) {
            return Err(Error::DuplicateConfirm {
                channel: pred,
                subscale: state.id,
            });
        }
        if state.end_of_epoch {
            return self.fod_on_end_of_epoch(i, pred, msg);
        }
        self.inst[i.index()].sync_blocked.insert(ch);
        self.record(
            i,
            TraceKind::Confirm,
            Some(msg.seq_id),
            Detail::default().from(pred).note("sync"),
        );
        let state = self.inst[i.index()].sync.as_mut().expect("sync state");
        if !state.pending.is_empty() {
            return Ok(());
        }
        state.aligned = true;
        let (sync, sid) = (state.id, state.session);
        let inst = &mut self.inst[i.index()];
        inst.sync_blocked.clear();
        self.record(
            i,
            TraceKind::EpochFlip,
            None,
            Detail::default().subscale(sync.0).note("aligned"),
        );
        let outgoing: Vec<SubscaleId> = self.inst[i.index()].out_subs.keys().copied().collect();
        for sub in outgoing {
            self.start_migration(i, sub)?;
        }
        let incoming: Vec<SubscaleId> = self.inst[i.index()].in_subs.keys().copied().collect();
        for sub in incoming {
            self.sync_on_install(i, sub)?;
        }
        self.sync_session_progress(sid)
    }

    pub(crate) fn sync_on_install(&mut self, t: InstanceId, sub: SubscaleId) -> Result<()> {
        let inst = &self.inst[t.index()];
        if !inst.sync.as_ref().is_some_and(|s| s.aligned) {
            return Ok(());
        }
        let Some(s) = inst.in_subs.get(&sub) else {
            return Ok(());
        };
        let Gate::Sync { batch } = s.gate else {
            return Ok(());
        };
        if batch && s.installed.len() < s.keygroups.len() {
            return Ok(());
        }
        let ready: Vec<KeyGroupId> = s
            .installed
            .iter()
            .copied()
            .filter(|&kg| inst.store.keygroup_status(kg) == Some(KeyGroupStatus::InactiveArrived))
            .collect();
        for kg in ready {
            self.activate_keygroup(t, sub, kg)?;
        }
        Ok(())
    }

    /// Progress hook for subscales without epoch tables.
    pub(crate) fn baseline_progress(&mut self, sub: SubscaleId) -> Result<()> {
        let Some(&sid) = self.coord.sub_session.get(&sub) else {
            return Ok(());
        };
        match self.coord.sessions[sid].protocol {
            ProtocolChoice::Fluid | ProtocolChoice::AllAtOnce => self.sync_session_progress(sid),
            ProtocolChoice::Unbound => {
                let target = self.coord.sessions[sid].subscale(sub).map(|s| s.target);
                let done = target
                    .and_then(|t| self.inst[t.index()].in_subs.get(&sub))
                    .is_some_and(|s| s.installed.len() == s.keygroups.len());
                if done {
                    self.complete_subscale(sub)?;
                }
                if self.coord.sessions[sid].is_complete()
                    && self.coord.sessions[sid].ended_at.is_none()
                {
                    self.finalize_scaling(sid)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn sync_session_progress(&mut self, sid: usize) -> Result<()> {
        if self.coord.sessions[sid].ended_at.is_some() {
            return Ok(());
        }
        for sub in self.coord.sessions[sid].plan.subscales.clone() {
            if sub.phase == SubscalePhase::Completed {
                continue;
            }
            let t = &self.inst[sub.target.index()];
            let done = t.sync.as_ref().is_some_and(|s| s.aligned)
                && sub
                    .keygroups
                    .iter()
                    .all(|&kg| t.store.keygroup_status(kg) == Some(KeyGroupStatus::Active));
            if done {
                self.complete_subscale(sub.id)?;
            }
        }
        let all_aligned = self
            .inst
            .iter()
            .filter_map(|i| i.sync.as_ref())
            .filter(|s| s.session == sid)
            .all(|s| s.aligned);
        if all_aligned && self.coord.sessions[sid].is_complete() {
            self.finalize_scaling(sid)?;
        }
        Ok(())
    }

    // ---- unbound ---------------------------------------------------------

    pub(crate) fn start_unbound_session(&mut self, sid: usize) -> Result<()> {
        let preds = self.session_predecessors(sid);
        self.trace_injections(sid);
        let subs = self.coord.sessions[sid].plan.subscales.clone();
        for sub in &subs {
            self.prepare_target(sub.target, sub, Gate::Universal)?;
            self.prepare_source(sub);
            let src = &mut self.inst[sub.source.index()];
            src.drops_orphans = true;
            if let Some(o) = src.out_subs.get_mut(&sub.id) {
                o.reroutes = false;
            }
        }
        self.switch_routing(sid, &preds)?;
        for sub in &subs {
            self.start_migration(sub.source, sub.id)?;
        }
        Ok(())
    }

    // ---- fetch on demand -------------------------------------------------

    pub(crate) fn start_fod_session(&mut self, sid: usize) -> Result<()> {
        let sync = self.fresh_sync_id();
        let preds = self.session_predecessors(sid);
        let fanout = self.cfg.migration.fetch_fanout.max(1);
        self.trace_injections(sid);
        let subs = self.coord.sessions[sid].plan.subscales.clone();
        let mut fod = FodSession {
            session: sid,
            sync,
            fanout,
            preds: preds.clone(),
            pairs: BTreeMap::new(),
            holder: BTreeMap::new(),
            in_transit: BTreeMap::new(),
            waiting: BTreeMap::new(),
            requested: BTreeSet::new(),
            drained: BTreeSet::new(),
            source_drained: BTreeMap::new(),
            transfers: BTreeMap::new(),
        };
        let mut sources = BTreeSet::new();
        for sub in &subs {
            for &kg in &sub.keygroups {
                self.inst[sub.target.index()].store.expect_incoming(kg)?;
                fod.pairs.insert(kg, (sub.source, sub.target));
                for part in 0..fanout {
                    fod.holder.insert((kg, part), sub.source);
                }
            }
            sources.insert(sub.source);
        }
        self.fod = Some(fod);
        for &s in &sources {
            self.inst[s.index()].sync = Some(SyncState {
                id: sync,
                session: sid,
                pending: preds.iter().copied().collect(),
                aligned: false,
                end_of_epoch: true,
            });
            for &p in &preds {
                let seq = self.next_control_seq(p);
                self.send(p, s, StreamMessage::confirm(p, seq, sync, self.now))?;
            }
        }
        self.switch_routing(sid, &preds)
    }

    fn fod_pairs_of_source(&self, s: InstanceId) -> BTreeSet<InstanceId> {
        self.fod
            .as_ref()
            .map(|f| {
                f.pairs
                    .values()
                    .filter(|(src, _)| *src == s)
                    .map(|(_, t)| *t)
                    .collect()
            })
            .unwrap_or_default()
    }

    fn fod_on_end_of_epoch(
        &mut self,
        s: InstanceId,
        pred: InstanceId,
        msg: StreamMessage,
    ) -> Result<()> {
        let fod = self.fod.as_mut().expect("fetch-on-demand session");
        let sync = fod.sync;
        let done = {
            let set = fod.source_drained.entry(s).or_default();
            set.insert(pred);
            set.len() == fod.preds.len()
        };
        self.record(
            s,
            TraceKind::Confirm,
            Some(msg.seq_id),
            Detail::default().from(pred).note("end_of_epoch"),
        );
        for t in self.fod_pairs_of_source(s) {
            let path = self.get_or_create_path(s, t, FETCH_TAG);
            self.path_send(
                path,
                PathItem::Drained {
                    source: s,
                    channel: pred,
                    sync,
                },
                0,
            );
        }
        if done {
            if let Some(state) = self.inst[s.index()].sync.as_mut() {
                state.aligned = true;
            }
            let held: Vec<(KeyGroupId, u32)> = self
                .fod
                .as_ref()
                .map(|f| {
                    f.holder
                        .iter()
                        .filter(|(_, h)| **h == s)
                        .map(|(k, _)| *k)
                        .collect()
                })
                .unwrap_or_default();
            for (kg, part) in held {
                let t = self.fod.as_ref().expect("fod").pairs[&kg].1;
                self.fod_transfer(s, t, kg, part)?;
            }
            self.fod_check_complete()?;
        }
        Ok(())
    }

    pub(crate) fn fod_on_drained(
        &mut self,
        t: InstanceId,
        source: InstanceId,
        channel: InstanceId,
        _sync: SubscaleId,
    ) -> Result<()> {
        if let Some(f) = self.fod.as_mut() {
            f.drained.insert((t, source, channel));
        }
        self.wake(t, self.now);
        Ok(())
    }

    /// Fetch-on-demand gate for data records; `None` when not involved.
    pub(crate) fn fod_processable(
        &self,
        i: InstanceId,
        ch: ChannelId,
        key: &[u8],
        kg: KeyGroupId,
    ) -> Option<bool> {
        let f = self.fod.as_ref()?;
        let &(s, t) = f.pairs.get(&kg)?;
        let part = sub_keygroup(key, self.graph.num_keygroups, f.fanout);
        let holds = f.holder.get(&(kg, part)) == Some(&i);
        if i == t {
            let pred = self.graph.channel(ch).sender;
            Some(holds && f.drained.contains(&(t, s, pred)))
        } else if i == s {
            Some(holds)
        } else {
            None
        }
    }

    /// The instance is stuck on the head of `ch`; fetch what it needs.
    pub(crate) fn fod_on_suspended(&mut self, i: InstanceId, ch: ChannelId) -> Result<()> {
        self.fod_unpin(i);
        let Some(f) = self.fod.as_ref() else {
            return Ok(());
        };
        let Some(head) = self.graph.channel(ch).normal_head(self.now) else {
            return Ok(());
        };
        let Some(key) = head.msg.key.clone() else {
            return Ok(());
        };
        let kg = self.keygroup(&key);
        let Some(&(s, t)) = f.pairs.get(&kg) else {
            return Ok(());
        };
        let part = sub_keygroup(&key, self.graph.num_keygroups, f.fanout);
        if i == t && !f.drained.contains(&(t, s, self.graph.channel(ch).sender)) {
            return Ok(());
        }
        if f.requested.contains(&(i, kg, part)) || f.in_transit.get(&(kg, part)) == Some(&i) {
            return Ok(());
        }
        let holder = match f.in_transit.get(&(kg, part)) {
            Some(&dest) => dest,
            None => f.holder[&(kg, part)],
        };
        if holder == i {
            return Ok(());
        }
        self.fod
            .as_mut()
            .expect("fod")
            .requested
            .insert((i, kg, part));
        self.record(
            i,
            TraceKind::FetchRequest,
            None,
            Detail::default().kg(kg.0).peer(holder).value(part as i64),
        );
        let path = self.get_or_create_path(i, holder, FETCH_TAG);
        self.path_send(
            path,
            PathItem::Fetch {
                kg,
                sub: part,
                requester: i,
            },
            0,
        );
        Ok(())
    }

    pub(crate) fn fod_on_fetch(
        &mut self,
        at: InstanceId,
        kg: KeyGroupId,
        part: u32,
        requester: InstanceId,
    ) -> Result<()> {
        let Some(f) = self.fod.as_mut() else {
            return Ok(());
        };
        let key = (kg, part);
        if f.holder.get(&key) == Some(&at) && !f.in_transit.contains_key(&key) {
            if self.inst[at.index()].fod.pinned.contains(&key) {
                f.waiting.entry(key).or_default().push(requester);
                return Ok(());
            }
            return self.fod_transfer(at, requester, kg, part);
        }
        if f.in_transit.get(&key) == Some(&at) {
            f.waiting.entry(key).or_default().push(requester);
            return Ok(());
        }
        let next = f.in_transit.get(&key).copied().unwrap_or(f.holder[&key]);
        let path = self.get_or_create_path(at, next, FETCH_TAG);
        self.path_send(
            path,
            PathItem::Fetch {
                kg,
                sub: part,
                requester,
            },
            0,
        );
        Ok(())
    }

    fn fod_transfer(
        &mut self,
        from: InstanceId,
        to: InstanceId,
        kg: KeyGroupId,
        part: u32,
    ) -> Result<()> {
        if from == to {
            return Ok(());
        }
        let f = self.fod.as_mut().expect("fod");
        let (fanout, sync) = (f.fanout, f.sync);
        f.in_transit.insert((kg, part), to);
        *f.transfers.entry((kg, part)).or_default() += 1;
        let k = self.graph.num_keygroups;
        let entries = self.inst[from.index()].store.entries_mut(kg);
        let keys: Vec<_> = entries
            .keys()
            .filter(|key| sub_keygroup(key, k, fanout) == part)
            .cloned()
            .collect();
        let moved = keys
            .into_iter()
            .filter_map(|key| entries.remove(&key).map(|v| (key, v)))
            .collect();
        let chunk = StateChunk {
            subscale_id: sync,
            keygroup: kg,
            entries: moved,
            source: from,
            target: to,
        };
        let size = self.chunk_ticks(&chunk.entries);
        self.record(
            from,
            TraceKind::FetchTransfer,
            None,
            Detail::default().kg(kg.0).peer(to).value(part as i64),
        );
        let path = self.get_or_create_path(from, to, FETCH_TAG);
        self.path_send(path, PathItem::Fetched { chunk, sub: part }, size);
        Ok(())
    }

    pub(crate) fn fod_on_fetched(
        &mut self,
        at: InstanceId,
        _from: InstanceId,
        chunk: StateChunk,
        part: u32,
    ) -> Result<()> {
        let kg = chunk.keygroup;
        let entries = self.inst[at.index()].store.entries_mut(kg);
        for (k, v) in chunk.entries {
            match entries.get_mut(&k) {
                Some(existing) => crate::state::merge_values(existing, &v),
                None => {
                    entries.insert(k, v);
                }
            }
        }
        let f = self.fod.as_mut().expect("fod");
        f.holder.insert((kg, part), at);
        f.in_transit.remove(&(kg, part));
        f.requested.remove(&(at, kg, part));
        self.inst[at.index()].fod.pinned.insert((kg, part));
        self.wake(at, self.now);
        self.fod_check_complete()
    }

    /// Clears pins after the instance took a record and serves queued requests.
    pub(crate) fn fod_unpin(&mut self, i: InstanceId) {
        if !self.inst[i.index()].fod.pinned.is_empty() {
            self.inst[i.index()].fod.pinned.clear();
        }
    }

    pub(crate) fn fod_serve_waiting(&mut self, i: InstanceId) -> Result<()> {
        let Some(f) = self.fod.as_ref() else {
            return Ok(());
        };
        let pinned = &self.inst[i.index()].fod.pinned;
        let ready: Vec<(KeyGroupId, u32)> = f
            .waiting
            .keys()
            .copied()
            .filter(|k| {
                f.holder.get(k) == Some(&i) && !f.in_transit.contains_key(k) && !pinned.contains(k)
            })
            .collect();
        for key in ready {
            let mut queue = self
                .fod
                .as_mut()
                .expect("fod")
                .waiting
                .remove(&key)
                .unwrap_or_default();
            if queue.is_empty() {
                continue;
            }
            let first = queue.remove(0);
            self.fod_transfer(i, first, key.0, key.1)?;
            if !queue.is_empty() {
                self.fod.as_mut().expect("fod").waiting.insert(key, queue);
            }
        }
        Ok(())
    }

    fn fod_check_complete(&mut self) -> Result<()> {
        let Some(f) = self.fod.as_ref() else {
            return Ok(());
        };
        let sources: BTreeSet<InstanceId> = f.pairs.values().map(|(s, _)| *s).collect();
        let drained = sources.iter().all(|s| {
            f.source_drained
                .get(s)
                .is_some_and(|d| d.len() == f.preds.len())
        });
        let settled = f.in_transit.is_empty()
            && f.waiting.values().all(Vec::is_empty)
            && f.holder.iter().all(|((kg, _), h)| f.pairs[kg].1 == *h);
        if !(drained && settled) {
            return Ok(());
        }
        let sid = f.session;
        let sync = f.sync;
        let pairs = f.pairs.clone();
        for (kg, (s, t)) in pairs {
            let src = &mut self.inst[s.index()].store;
            src.begin_migration(&BTreeSet::from([kg]))?;
            let mut chunk = src.emit_chunk(kg, sync, s, t)?;
            let dst = &mut self.inst[t.index()].store;
            chunk.entries.extend(std::mem::take(dst.entries_mut(kg)));
            dst.install_chunk(&chunk)?;
            dst.activate(kg)?;
            self.record(t, TraceKind::Activate, None, Detail::default().kg(kg.0));
        }
        for sub in self.coord.sessions[sid].plan.subscales.clone() {
            self.complete_subscale(sub.id)?;
        }
        self.finalize_scaling(sid)
    }

    // ---- stop and restart ------------------------------------------------

    pub(crate) fn start_restart_session(&mut self, sid: usize) -> Result<()> {
        self.trace_injections(sid);
        for i in 0..self.inst.len() {
            if let Some(c) = self.inst[i].source.as_mut() {
                c.paused = true;
            }
        }
        self.record(
            CONTROL,
            TraceKind::RestartStop,
            None,
            Detail::default().value(sid as i64),
        );
        self.clock
            .schedule(self.now + 1, CONTROL, Event::RestartProbe(sid));
        Ok(())
    }

    pub(crate) fn on_restart_probe(&mut self, sid: usize) -> Result<()> {
        if self.is_quiescent() {
            let at = self.now + self.cfg.migration.restart_ticks;
            self.clock.schedule(at, CONTROL, Event::RestartResume(sid));
        } else {
            self.clock
                .schedule(self.now + 1, CONTROL, Event::RestartProbe(sid));
        }
        Ok(())
    }

    pub(crate) fn on_restart_resume(&mut self, sid: usize) -> Result<()> {
        let preds = self.session_predecessors(sid);
        for m in self.coord.sessions[sid].plan.migrations.clone() {
            let entries = self.inst[m.source.index()].store.release(m.kg);
            self.inst[m.target.index()].store.adopt(m.kg, entries);
        }
        self.switch_routing(sid, &preds)?;
        for sub in self.coord.sessions[sid].plan.subscales.clone() {
            self.complete_subscale(sub.id)?;
        }
        self.record(
            CONTROL,
            TraceKind::RestartResume,
            None,
            Detail::default().value(sid as i64),
        );
        self.finalize_scaling(sid)?;
        for i in 0..self.inst.len() {
            if self.inst[i].source.is_some() {
                self.resume_source(InstanceId(i as u32));
            }
        }
        Ok(())
    }
}
