//! Scaling sessions: deployment, subscale scheduling and finalization.

use std::collections::BTreeMap;

use super::engine::{Engine, CONTROL};
use crate::config::Division;
use crate::control::{
    divide_subscales, handle_scale_request, next_subscale, MigrationPlan, ScaleAction,
    ScalingSession,
};
use crate::error::{Error, Result};
use crate::graph::Partitioning;
use crate::ids::{InstanceId, OperatorId, SubscaleId};
use crate::protocol::{ProtocolChoice, SchedulingConfig, SubscalePhase};
use crate::trace::{Detail, TraceKind};

#[derive(Default)]
pub(crate) struct Coordinator {
    pub sessions: Vec<ScalingSession>,
    /// Running session per operator.
    pub active: BTreeMap<OperatorId, usize>,
    pub sub_session: BTreeMap<SubscaleId, usize>,
    pub next_subscale_id: u32,
    pub in_flight: BTreeMap<InstanceId, usize>,
    /// Requests waiting for a terminated session to drain.
    pub queued: BTreeMap<OperatorId, usize>,
    /// Instances to retire when a scale-in session ends.
    pub surplus: BTreeMap<usize, Vec<InstanceId>>,
}

impl Engine {
    pub(crate) fn on_scale_request(&mut self, idx: usize) -> Result<()> {
        let spec = self.cfg.scale[idx].clone();
        let (op, action) =
            handle_scale_request(&self.graph, &spec.operator, spec.to, &self.coord.active)?;
        match action {
            ScaleAction::Noop => {
                if self.live_instances(op).len() as u32 != spec.to {
                    self.start_session(idx, op)?;
                }
                Ok(())
            }
            ScaleAction::TerminateAndRestart { previous } => {
                self.coord.queued.insert(op, idx);
                let prev = &mut self.coord.sessions[previous];
                if prev.protocol == ProtocolChoice::Drrs {
                    prev.terminate_requested = true;
                    if prev.is_drained() {
                        self.finalize_session(previous)?;
                    }
                }
                Ok(())
            }
            ScaleAction::Start | ScaleAction::StartWithDeploymentSync { .. } => {
                self.start_session(idx, op)
            }
        }
    }

    /// Current owner of every key-group of `op`, read from a live predecessor.
    pub(crate) fn current_owners(&self, op: OperatorId) -> Result<Vec<InstanceId>> {
        let pred = self
            .graph
            .predecessors(op)
            .into_iter()
            .find(|p| !self.inst[p.index()].retired)
            .ok_or_else(|| Error::InvalidSpec("scaled operator has no predecessor".into()))?;
        let table = self
            .graph
            .routing_table(pred, op)
            .ok_or_else(|| Error::ProtocolError(format!("{pred} has no routing table")))?;
        table
            .owners()
            .map(|(kg, o)| o.ok_or(Error::IncompleteTable(kg)))
            .collect()
    }

    fn start_session(&mut self, idx: usize, op: OperatorId) -> Result<()> {
        let spec = self.cfg.scale[idx].clone();
        let protocol = spec.protocol.unwrap_or(self.cfg.protocol);
        let owner_before = self.current_owners(op)?;
        let mut live = self.live_instances(op);
        let target = spec.to as usize;
        let mut surplus = Vec::new();
        if target > live.len() {
            let added = self.deploy_update(op, target - live.len())?;
            for &i in &added {
                self.try_align(i)?;
            }
            live.extend(added);
        } else {
            surplus = live.split_off(target);
        }
        let mut plan = MigrationPlan::rebalance(owner_before, &live)?;
        let max = match (protocol, self.cfg.migration.division) {
            (ProtocolChoice::Drrs, Division::Subscales) => self.cfg.migration.max_subscale_size,
            _ => usize::MAX,
        };
        plan.subscales = divide_subscales(&plan.migrations, max, self.coord.next_subscale_id);
        self.coord.next_subscale_id += plan.subscales.len() as u32;
        let sid = self.coord.sessions.len();
        let session = ScalingSession::new(sid, op, protocol, plan, self.now);
        self.record(
            CONTROL,
            TraceKind::SessionStart,
            None,
            Detail::default()
                .value(session.plan.migrations.len() as i64)
                .note(protocol.name()),
        );
        for s in &session.plan.subscales {
            self.coord.sub_session.insert(s.id, sid);
        }
        self.coord.sessions.push(session);
        self.coord.active.insert(op, sid);
        self.coord.surplus.insert(sid, surplus);
        let sched = self.cfg.scheduling_for(protocol);
        for i in self.graph.operator(op).instances.clone() {
            self.inst[i.index()].sched = sched.clone();
        }
        if self.coord.sessions[sid].plan.subscales.is_empty() {
            return self.finalize_session(sid);
        }
        match protocol {
            ProtocolChoice::Drrs => self.schedule_subscales(sid),
            ProtocolChoice::Fluid | ProtocolChoice::AllAtOnce => self.start_sync_session(sid),
            ProtocolChoice::Unbound => self.start_unbound_session(sid),
            ProtocolChoice::FetchOnDemand => self.start_fod_session(sid),
            ProtocolChoice::StopRestart => self.start_restart_session(sid),
        }
    }

    /// Deploys `count` new instances of `op` and wires them into the graph.
    /// New instances copy the live routing of an existing sibling.
    pub(crate) fn deploy_update(
        &mut self,
        op: OperatorId,
        count: usize,
    ) -> Result<Vec<InstanceId>> {
        let sibling = self.live_instances(op)[0];
        let ups: Vec<InstanceId> = self
            .graph
            .predecessors(op)
            .into_iter()
            .filter(|p| !self.inst[p.index()].retired)
            .collect();
        let downs: Vec<_> = self.graph.downstream_edges(op).cloned().collect();
        let mut added = Vec::new();
        for _ in 0..count {
            let id = self.add_instance(op)?;
            for &u in &ups {
                self.connect(u, id);
            }
            for e in &downs {
                for d in self.live_instances(e.to) {
                    self.connect(id, d);
                }
                if e.partitioning == Partitioning::Keyed {
                    let table = self
                        .graph
                        .routing_table(sibling, e.to)
                        .cloned()
                        .ok_or_else(|| {
                            Error::ProtocolError(format!("{sibling} has no routing table"))
                        })?;
                    self.graph.routing.insert((id, e.to), table);
                }
            }
            self.record(id, TraceKind::Deploy, None, Detail::default().peer(sibling));
            added.push(id);
        }
        Ok(added)
    }

    /// Injects as many pending subscales as the concurrency cap allows.
    pub(crate) fn schedule_subscales(&mut self, sid: usize) -> Result<()> {
        loop {
            let session = &self.coord.sessions[sid];
            if session.terminate_requested || session.ended_at.is_some() {
                return Ok(());
            }
            let pending = session.pending();
            let mut holdings = BTreeMap::new();
            for s in &pending {
                holdings
                    .entry(s.target)
                    .or_insert_with(|| self.inst[s.target.index()].store.readable_key_count());
            }
            let Some(sub) = next_subscale(
                &pending,
                &holdings,
                &self.coord.in_flight,
                self.cfg.migration.concurrency_cap,
            )
            .cloned() else {
                return Ok(());
            };
            *self.coord.in_flight.entry(sub.source).or_default() += 1;
            *self.coord.in_flight.entry(sub.target).or_default() += 1;
            self.inject_subscale(sid, sub)?;
        }
    }

    /// Bookkeeping shared by every protocol when a subscale finishes.
    pub(crate) fn complete_subscale(&mut self, id: SubscaleId) -> Result<()> {
        let sid = self.coord.sub_session[&id];
        let sub = self.coord.sessions[sid]
            .subscale(id)
            .cloned()
            .ok_or_else(|| Error::ProtocolError(format!("unknown subscale {id}")))?;
        if sub.phase == SubscalePhase::Completed {
            return Ok(());
        }
        self.coord.sessions[sid].mark(id, SubscalePhase::Completed, self.now);
        for i in [sub.source, sub.target] {
            if let Some(n) = self.coord.in_flight.get_mut(&i) {
                *n = n.saturating_sub(1);
            }
        }
        let t = &mut self.inst[sub.target.index()];
        t.in_subs.remove(&id);
        t.incoming.retain(|_, s| *s != id);
        self.inst[sub.source.index()].out_subs.remove(&id);
        self.record(
            sub.target,
            TraceKind::SubscaleComplete,
            None,
            Detail::default().subscale(id.0).peer(sub.source),
        );
        if self.coord.sessions[sid].protocol == ProtocolChoice::Drrs {
            self.schedule_subscales(sid)?;
            let s = &self.coord.sessions[sid];
            if s.is_complete() || (s.terminate_requested && s.is_drained()) {
                self.finalize_session(sid)?;
            }
        }
        Ok(())
    }

    pub(crate) fn finalize_scaling(&mut self, sid: usize) -> Result<()> {
        self.finalize_session(sid)
    }

    fn finalize_session(&mut self, sid: usize) -> Result<()> {
        let op = self.coord.sessions[sid].operator;
        self.coord.sessions[sid].finalize(self.now)?;
        for i in self.graph.operator(op).instances.clone() {
            let inst = &mut self.inst[i.index()];
            inst.store.finalize();
            inst.sched = SchedulingConfig::disabled();
            inst.in_subs.clear();
            inst.out_subs.clear();
            inst.incoming.clear();
            inst.sync = None;
            inst.sync_blocked.clear();
            inst.fod = Default::default();
        }
        self.fod = None;
        for i in self.coord.surplus.remove(&sid).unwrap_or_default() {
            self.retire(i);
        }
        let kind = if self.coord.sessions[sid].terminate_requested {
            TraceKind::SessionTerminated
        } else {
            TraceKind::SessionEnd
        };
        self.record(CONTROL, kind, None, Detail::default().value(sid as i64));
        self.coord.active.remove(&op);
        for i in self.graph.operator(op).instances.clone() {
            self.wake(i, self.now);
        }
        if let Some(idx) = self.coord.queued.remove(&op) {
            self.start_session(idx, op)?;
        }
        Ok(())
    }

    fn retire(&mut self, i: InstanceId) {
        self.inst[i.index()].retired = true;
        for c in self.inst[i.index()].outputs.clone() {
            let r = self.graph.channel(c).receiver;
            self.wake(r, self.now);
        }
    }
}
