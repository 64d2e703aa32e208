use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::baseline::{FodInstance, FodSession, SyncState};
use super::checkpoint::{CheckpointRun, Snapshot};
use super::coordinator::Coordinator;
use super::path::{Path, PathItem};
use crate::channel::{Lane, Queued};
use crate::clock::VirtualClock;
use crate::config::SimConfig;
use crate::control::ScalingSession;
use crate::error::{Error, Result};
use crate::graph::{build_graph, DataflowGraph, OperatorKind, Partitioning};
use crate::harness::operators::{apply_sum, window_add, window_fire, WindowSpec};
use crate::harness::workload::{source_streams, SourceEvent, SourceItem};
use crate::ids::{
    make_seq, ChannelId, CheckpointId, InstanceId, Key, KeyGroupId, OperatorId, PathId, SeqId,
    SubscaleId, Tick, CONTROL_BITS,
};
use crate::message::{MessageKind, StreamMessage};
use crate::protocol::{
    next_message, EpochTable, ProtocolChoice, RerouteBuffer, SchedulingConfig, Selection,
};
use crate::state::{key_to_keygroup, KeyGroupStatus, KeyedStateStore, StateValue};
use crate::trace::{Detail, Trace, TraceKind};

/// Pseudo-instance that owns coordinator events; sorts after every real
/// instance at the same tick.
pub(crate) const CONTROL: InstanceId = InstanceId(u32::MAX);

#[derive(Clone, Debug)]
pub(crate) enum Event {
    Wake,
    PathArrive(PathId),
    ChunkEmit(SubscaleId),
    RerouteTimeout(SubscaleId),
    ScaleRequest(usize),
    Checkpoint(CheckpointId),
    RestartProbe(usize),
    RestartResume(usize),
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::Wake => "wake",
            Event::PathArrive(_) => "path_arrive",
            Event::ChunkEmit(_) => "chunk_emit",
            Event::RerouteTimeout(_) => "reroute_timeout",
            Event::ScaleRequest(_) => "scale_request",
            Event::Checkpoint(_) => "checkpoint",
            Event::RestartProbe(_) => "restart_probe",
            Event::RestartResume(_) => "restart_resume",
        }
    }
}

/// What [`Engine::step`] executed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutedEvent {
    pub tick: Tick,
    pub instance: InstanceId,
    pub kind: &'static str,
}

#[derive(Clone, Debug)]
pub(crate) struct SourceCursor {
    pub streams: Arc<Vec<Vec<SourceItem>>>,
    pub stream: usize,
    pub next: usize,
    pub paused: bool,
}

impl SourceCursor {
    fn peek(&self) -> Option<&SourceItem> {
        self.streams[self.stream].get(self.next)
    }
}

/// Source side of a migration in progress.
#[derive(Clone, Debug)]
pub(crate) struct OutSub {
    pub keygroups: BTreeSet<KeyGroupId>,
    pub target: InstanceId,
    pub path: PathId,
    pub remaining: VecDeque<KeyGroupId>,
    pub buffer: RerouteBuffer,
    pub started: bool,
    /// Records reaching a migrated key-group are forwarded to the target.
    pub reroutes: bool,
}

#[derive(Clone, Debug)]
pub(crate) enum Gate {
    /// Implicit alignment through rerouted confirms.
    Epochs(EpochTable),
    /// Coupled barrier alignment at this instance; `batch` holds activation
    /// until every chunk arrived.
    Sync { batch: bool },
    /// No alignment at all.
    Universal,
}

/// Target side of a migration in progress.
#[derive(Clone, Debug)]
pub(crate) struct InSub {
    pub keygroups: BTreeSet<KeyGroupId>,
    pub installed: BTreeSet<KeyGroupId>,
    /// Rerouted records waiting for their key-group, with whether they were
    /// delivered after a checkpoint marker.
    pub pending: BTreeMap<KeyGroupId, VecDeque<(StreamMessage, bool)>>,
    pub gate: Gate,
}

pub(crate) struct Instance {
    pub id: InstanceId,
    pub op: OperatorId,
    pub kind: OperatorKind,
    pub store: KeyedStateStore,
    pub inputs: Vec<ChannelId>,
    pub outputs: Vec<ChannelId>,
    pub busy_until: Tick,
    pub next_wake: Option<Tick>,
    pub current: usize,
    pub stalled: bool,
    pub sched: SchedulingConfig,
    pub suspended_since: Option<Tick>,
    pub seq: u64,
    pub control_seq: u64,
    pub source: Option<SourceCursor>,
    pub marker_rr: usize,
    pub wm_in: BTreeMap<ChannelId, Tick>,
    pub watermark: Option<Tick>,
    pub ckpt_blocked: BTreeSet<ChannelId>,
    pub sync_blocked: BTreeSet<ChannelId>,
    pub retired: bool,
    pub out_subs: BTreeMap<SubscaleId, OutSub>,
    pub in_subs: BTreeMap<SubscaleId, InSub>,
    pub incoming: BTreeMap<KeyGroupId, SubscaleId>,
    pub deferred_triggers: BTreeMap<CheckpointId, Vec<SubscaleId>>,
    pub sync: Option<SyncState>,
    pub fod: FodInstance,
    pub ckpt_seen: BTreeSet<ChannelId>,
    pub snapshotted: Option<CheckpointId>,
    /// Records for key-groups it no longer owns are dropped.
    pub drops_orphans: bool,
}

impl Instance {
    fn new(id: InstanceId, op: OperatorId, kind: OperatorKind, store: KeyedStateStore) -> Self {
        Instance {
            id,
            op,
            kind,
            store,
            inputs: Vec::new(),
            outputs: Vec::new(),
            busy_until: 0,
            next_wake: None,
            current: 0,
            stalled: false,
            sched: SchedulingConfig::disabled(),
            suspended_since: None,
            seq: 0,
            control_seq: 0,
            source: None,
            marker_rr: 0,
            wm_in: BTreeMap::new(),
            watermark: None,
            ckpt_blocked: BTreeSet::new(),
            sync_blocked: BTreeSet::new(),
            retired: false,
            out_subs: BTreeMap::new(),
            in_subs: BTreeMap::new(),
            incoming: BTreeMap::new(),
            deferred_triggers: BTreeMap::new(),
            sync: None,
            fod: FodInstance::default(),
            ckpt_seen: BTreeSet::new(),
            snapshotted: None,
            drops_orphans: false,
        }
    }

    pub fn is_blocked(&self, ch: ChannelId) -> bool {
        self.ckpt_blocked.contains(&ch) || self.sync_blocked.contains(&ch)
    }
}

/// A data record applied to a stateful operator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppliedRecord {
    pub tick: Tick,
    pub instance: InstanceId,
    pub operator: OperatorId,
    pub key: Key,
    pub seq: SeqId,
    /// Producing instance, which identifies the logical input channel.
    pub origin: InstanceId,
}

/// Everything a finished run exposes to the harness.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub protocol: ProtocolChoice,
    pub seed: u64,
    pub trace: Trace,
    /// Final keyed state per stateful operator name.
    pub final_state: BTreeMap<String, BTreeMap<Key, StateValue>>,
    pub applied: Vec<AppliedRecord>,
    pub emitted_records: u64,
    pub markers_emitted: u64,
    pub markers_received: u64,
    pub sink_outputs: Vec<(Key, i64)>,
    /// `(arrival tick, latency)` of every latency marker at a sink.
    pub latencies: Vec<(Tick, Tick)>,
    pub sessions: Vec<ScalingSession>,
    pub snapshots: Vec<Snapshot>,
    pub end_tick: Tick,
    /// Records still queued anywhere when the run stopped.
    pub in_flight_records: u64,
    pub authoritative: bool,
    pub stab_window: Tick,
    pub stab_threshold: f64,
    pub throughput_bucket: Tick,
}

/// The virtual-time simulator.
pub struct Engine {
    pub(crate) cfg: SimConfig,
    pub(crate) graph: DataflowGraph,
    pub(crate) clock: VirtualClock<Event>,
    pub(crate) inst: Vec<Instance>,
    pub(crate) paths: Vec<Path>,
    pub(crate) path_index: BTreeMap<(InstanceId, InstanceId, u32), PathId>,
    pub(crate) trace: Trace,
    pub(crate) coord: Coordinator,
    pub(crate) ckpt: Option<CheckpointRun>,
    pub(crate) snapshots: Vec<Snapshot>,
    pub(crate) applied: Vec<AppliedRecord>,
    pub(crate) sink_outputs: Vec<(Key, i64)>,
    pub(crate) latencies: Vec<(Tick, Tick)>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) fod: Option<FodSession>,
    pub(crate) emitted: u64,
    pub(crate) markers_emitted: u64,
    pub(crate) markers_received: u64,
    pub(crate) now: Tick,
    windows: BTreeMap<OperatorId, WindowSpec>,
}

/// Runs `cfg` to completion.
pub fn run(cfg: &SimConfig) -> Result<RunResult> {
    Engine::new(cfg.clone())?.run_to_end()
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let graph = build_graph(&cfg.job)?;
        let k = graph.num_keygroups;
        let source_count: usize = graph.sources().map(|o| o.instances.len()).sum();
        let streams = match &cfg.script {
            Some(s) => {
                if s.len() != source_count {
                    return Err(Error::Config(format!(
                        "script has {} streams for {source_count} source instances",
                        s.len()
                    )));
                }
                s.clone()
            }
            None => Arc::new(source_streams(&cfg.workload, source_count)?),
        };
        let mut windows = BTreeMap::new();
        let mut inst = Vec::new();
        let mut source_idx = 0;
        for op in &graph.operators {
            if op.spec.kind == OperatorKind::SlidingWindow {
                windows.insert(
                    op.id,
                    WindowSpec::new(op.spec.window_size, op.spec.window_slide)?,
                );
            }
            let n = op.instances.len() as u32;
            for (slot, &id) in op.instances.iter().enumerate() {
                let store = if op.spec.kind.is_stateful() {
                    KeyedStateStore::with_owned(
                        k,
                        (0..k)
                            .filter(|&kg| crate::control::uniform_owner(kg, n, k) == slot as u32)
                            .map(KeyGroupId),
                    )
                } else {
                    KeyedStateStore::new(k)
                };
                let mut i = Instance::new(id, op.id, op.spec.kind, store);
                if op.spec.kind == OperatorKind::Source {
                    i.source = Some(SourceCursor {
                        streams: streams.clone(),
                        stream: source_idx,
                        next: 0,
                        paused: false,
                    });
                    source_idx += 1;
                }
                inst.push(i);
            }
        }
        for ch in &graph.channels {
            inst[ch.sender.index()].outputs.push(ch.id);
            inst[ch.receiver.index()].inputs.push(ch.id);
        }
        let mut engine = Engine {
            rng: ChaCha8Rng::seed_from_u64(cfg.job.seed),
            cfg,
            graph,
            clock: VirtualClock::new(),
            inst,
            paths: Vec::new(),
            path_index: BTreeMap::new(),
            trace: Trace::default(),
            coord: Coordinator::default(),
            ckpt: None,
            snapshots: Vec::new(),
            applied: Vec::new(),
            sink_outputs: Vec::new(),
            latencies: Vec::new(),
            fod: None,
            emitted: 0,
            markers_emitted: 0,
            markers_received: 0,
            now: 0,
            windows,
        };
        for i in 0..engine.inst.len() {
            let first = engine.inst[i]
                .source
                .as_ref()
                .and_then(|s| s.peek().map(|it| it.at));
            if let Some(at) = first {
                engine.wake(InstanceId(i as u32), at);
            }
        }
        for (idx, s) in engine.cfg.scale.iter().enumerate() {
            engine
                .clock
                .schedule(s.at_tick, CONTROL, Event::ScaleRequest(idx));
        }
        for (idx, &at) in engine.cfg.checkpoints.iter().enumerate() {
            engine
                .clock
                .schedule(at, CONTROL, Event::Checkpoint(idx as CheckpointId + 1));
        }
        Ok(engine)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &DataflowGraph {
        &self.graph
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn store(&self, inst: InstanceId) -> &KeyedStateStore {
        &self.inst[inst.index()].store
    }

    /// Executes exactly one pending event.
    pub fn step(&mut self) -> Result<ExecutedEvent> {
        let (tick, instance, event) = self.clock.step()?;
        self.now = tick;
        let kind = event.name();
        self.dispatch(instance, event)?;
        Ok(ExecutedEvent {
            tick,
            instance,
            kind,
        })
    }

    /// Runs until no events remain (or the tick limit) and collects results.
    pub fn run_to_end(mut self) -> Result<RunResult> {
        loop {
            match self.clock.peek_time() {
                None => break,
                Some(t) if t > self.cfg.runtime.max_ticks => break,
                _ => {}
            }
            self.step()?;
        }
        if let Some(s) = self.coord.sessions.iter().find(|s| s.ended_at.is_none()) {
            return Err(Error::ProtocolError(format!(
                "run ended with scaling session {} unfinished",
                s.id
            )));
        }
        Ok(self.into_result())
    }

    fn dispatch(&mut self, instance: InstanceId, event: Event) -> Result<()> {
        match event {
            Event::Wake => {
                let inst = &mut self.inst[instance.index()];
                if inst.next_wake.is_some_and(|w| w <= self.now) {
                    inst.next_wake = None;
                }
                self.run_instance(instance)
            }
            Event::PathArrive(p) => self.on_path_arrive(p),
            Event::ChunkEmit(s) => self.emit_next_chunk(instance, s),
            Event::RerouteTimeout(s) => self.on_reroute_timeout(instance, s),
            Event::ScaleRequest(idx) => self.on_scale_request(idx),
            Event::Checkpoint(id) => self.start_checkpoint(id),
            Event::RestartProbe(s) => self.on_restart_probe(s),
            Event::RestartResume(s) => self.on_restart_resume(s),
        }
    }

    fn into_result(mut self) -> RunResult {
        let mut final_state: BTreeMap<String, BTreeMap<Key, StateValue>> = BTreeMap::new();
        for inst in &self.inst {
            if !inst.kind.is_stateful() {
                continue;
            }
            let name = self.graph.operator(inst.op).spec.id.clone();
            let map = final_state.entry(name).or_default();
            for kg in 0..self.graph.num_keygroups {
                for (k, v) in inst.store.entries(KeyGroupId(kg)) {
                    match map.get_mut(k) {
                        Some(existing) => crate::state::merge_values(existing, v),
                        None => {
                            map.insert(k.clone(), v.clone());
                        }
                    }
                }
            }
        }
        let in_flight_records = self
            .graph
            .channels
            .iter()
            .map(|c| {
                c.input_queue()
                    .map(|q| &q.msg)
                    .chain(c.output_cache().iter())
                    .filter(|m| {
                        m.kind == MessageKind::Data
                            && self.inst[c.sender.index()].kind == OperatorKind::Source
                    })
                    .count() as u64
            })
            .sum();
        RunResult {
            name: self.cfg.name.clone(),
            protocol: self.cfg.protocol,
            seed: self.cfg.workload.seed,
            trace: std::mem::take(&mut self.trace),
            final_state,
            applied: std::mem::take(&mut self.applied),
            emitted_records: self.emitted,
            markers_emitted: self.markers_emitted,
            markers_received: self.markers_received,
            sink_outputs: std::mem::take(&mut self.sink_outputs),
            latencies: std::mem::take(&mut self.latencies),
            sessions: std::mem::take(&mut self.coord.sessions),
            snapshots: std::mem::take(&mut self.snapshots),
            end_tick: self.now,
            in_flight_records,
            authoritative: self.cfg.protocol.is_authoritative()
                && self
                    .cfg
                    .scale
                    .iter()
                    .all(|s| s.protocol.is_none_or(|p| p.is_authoritative())),
            stab_window: self.cfg.runtime.stab_window,
            stab_threshold: self.cfg.runtime.stab_threshold,
            throughput_bucket: self.cfg.runtime.throughput_bucket,
        }
    }

    // ---- plumbing -------------------------------------------------------

    pub(crate) fn record(
        &mut self,
        at: InstanceId,
        kind: TraceKind,
        seq: Option<SeqId>,
        detail: Detail,
    ) {
        self.trace.record(self.now, at, kind, seq, detail);
    }

    pub(crate) fn wake(&mut self, i: InstanceId, at: Tick) {
        let at = at.max(self.now);
        let inst = &mut self.inst[i.index()];
        if inst.next_wake.is_none_or(|w| at < w) {
            inst.next_wake = Some(at);
            self.clock.schedule(at, i, Event::Wake);
        }
    }

    pub(crate) fn next_seq(&mut self, i: InstanceId) -> SeqId {
        let inst = &mut self.inst[i.index()];
        inst.seq += 1;
        inst.control_seq = 0;
        make_seq(i, inst.seq << CONTROL_BITS)
    }

    /// Sequence ids for protocol messages. They sort between the surrounding
    /// data ids without consuming data numbers.
    pub(crate) fn next_control_seq(&mut self, i: InstanceId) -> SeqId {
        let inst = &mut self.inst[i.index()];
        inst.control_seq += 1;
        if inst.control_seq == 1 << CONTROL_BITS {
            inst.seq += 1;
            inst.control_seq = 1;
        }
        make_seq(i, inst.seq << CONTROL_BITS | inst.control_seq)
    }

    pub(crate) fn base_latency(&self) -> Tick {
        self.cfg.job.network_latency
    }

    fn wire_latency(&mut self) -> Tick {
        let jitter = self.cfg.job.latency_jitter;
        self.base_latency()
            + if jitter > 0 {
                self.rng.random_range(0..=jitter)
            } else {
                0
            }
    }

    pub(crate) fn keygroup(&self, key: &[u8]) -> KeyGroupId {
        key_to_keygroup(key, self.graph.num_keygroups)
    }

    /// Moves cached messages onto the wire and wakes the receiver.
    pub(crate) fn transmit(&mut self, ch: ChannelId) {
        let lat = self.wire_latency();
        let now = self.now;
        let channel = self.graph.channel_mut(ch);
        if let Some(at) = channel.transmit(now, lat) {
            let r = channel.receiver;
            self.wake(r, at);
        }
    }

    pub(crate) fn channel_to(&mut self, from: InstanceId, to: InstanceId) -> ChannelId {
        match self.graph.channel_between(from, to) {
            Some(c) => c,
            None => self.connect(from, to),
        }
    }

    pub(crate) fn connect(&mut self, from: InstanceId, to: InstanceId) -> ChannelId {
        let c = self.graph.connect(from, to);
        if !self.inst[from.index()].outputs.contains(&c) {
            self.inst[from.index()].outputs.push(c);
            self.inst[to.index()].inputs.push(c);
            self.on_channel_created(c);
        }
        c
    }

    pub(crate) fn send(
        &mut self,
        from: InstanceId,
        to: InstanceId,
        msg: StreamMessage,
    ) -> Result<()> {
        let ch = self.channel_to(from, to);
        let now = self.now;
        self.graph
            .channel_mut(ch)
            .enqueue(msg, Lane::Normal, now, 0)?;
        self.transmit(ch);
        Ok(())
    }

    pub(crate) fn send_priority(&mut self, ch: ChannelId, msg: StreamMessage) -> Result<()> {
        let (now, lat) = (self.now, self.base_latency());
        let channel = self.graph.channel_mut(ch);
        if let Some(at) = channel.enqueue(msg, Lane::Priority, now, lat)? {
            let r = channel.receiver;
            self.wake(r, at);
        }
        Ok(())
    }

    fn outputs_stalled(&self, i: InstanceId) -> bool {
        let cap = self.cfg.job.output_cache_capacity();
        self.inst[i.index()]
            .outputs
            .iter()
            .any(|&c| self.graph.channel(c).cache_len() >= cap)
    }

    fn after_dequeue(&mut self, ch: ChannelId) {
        self.transmit(ch);
        let sender = self.graph.channel(ch).sender;
        if self.inst[sender.index()].stalled && !self.outputs_stalled(sender) {
            self.inst[sender.index()].stalled = false;
            self.wake(sender, self.now);
        }
    }

    pub(crate) fn live_instances(&self, op: OperatorId) -> Vec<InstanceId> {
        self.graph
            .operator(op)
            .instances
            .iter()
            .copied()
            .filter(|i| !self.inst[i.index()].retired)
            .collect()
    }

    /// Downstream receivers of a keyed record produced by `i`.
    fn route(&self, i: InstanceId, key: &[u8]) -> Result<Vec<InstanceId>> {
        let op = self.inst[i.index()].op;
        let mut out = Vec::new();
        for e in self.graph.downstream_edges(op) {
            match e.partitioning {
                Partitioning::Keyed => {
                    let table = self
                        .graph
                        .routing_table(i, e.to)
                        .ok_or_else(|| Error::ProtocolError(format!("{i} has no routing table")))?;
                    out.push(table.lookup_route(key)?);
                }
                Partitioning::Forward => out.push(self.forward_target(i, e.to)),
                Partitioning::Broadcast => out.extend(self.live_instances(e.to)),
            }
        }
        Ok(out)
    }

    fn forward_target(&self, i: InstanceId, to: OperatorId) -> InstanceId {
        let op = self.inst[i.index()].op;
        let pos = self
            .graph
            .operator(op)
            .instances
            .iter()
            .position(|&x| x == i)
            .unwrap_or(0);
        let downs = self.live_instances(to);
        downs[pos % downs.len()]
    }

    /// Sends a message produced by `i` to every output channel.
    pub(crate) fn broadcast(&mut self, i: InstanceId, msg: StreamMessage) -> Result<()> {
        for ch in self.inst[i.index()].outputs.clone() {
            let to = self.graph.channel(ch).receiver;
            if !self.inst[to.index()].retired {
                self.send(i, to, msg.clone())?;
            }
        }
        Ok(())
    }

    fn emit_marker(&mut self, i: InstanceId, marker: StreamMessage) -> Result<()> {
        let op = self.inst[i.index()].op;
        let Some(edge) = self.graph.downstream_edges(op).next().cloned() else {
            return Ok(());
        };
        let to = match edge.partitioning {
            Partitioning::Forward => self.forward_target(i, edge.to),
            _ => {
                let downs = self.live_instances(edge.to);
                let inst = &mut self.inst[i.index()];
                inst.marker_rr = inst.marker_rr.wrapping_add(1);
                downs[inst.marker_rr % downs.len()]
            }
        };
        self.send(i, to, marker)
    }

    pub(crate) fn get_or_create_path(
        &mut self,
        from: InstanceId,
        to: InstanceId,
        tag: u32,
    ) -> PathId {
        if let Some(&p) = self.path_index.get(&(from, to, tag)) {
            return p;
        }
        let id = PathId(self.paths.len() as u32);
        self.paths.push(Path::new(id, from, to));
        self.path_index.insert((from, to, tag), id);
        self.on_path_created(id);
        id
    }

    pub(crate) fn path_send(&mut self, path: PathId, item: PathItem, size_ticks: Tick) -> Tick {
        let (now, lat) = (self.now, self.base_latency());
        let p = &mut self.paths[path.index()];
        let arrive = p.send(now, item, size_ticks, lat);
        let to = p.to;
        self.clock.schedule(arrive, to, Event::PathArrive(path));
        arrive
    }

    /// Serialization time of a state chunk on a migration path.
    pub(crate) fn chunk_ticks(&self, entries: &BTreeMap<Key, StateValue>) -> Tick {
        let units: u64 = entries.values().map(|v| v.entry_count_hint() as u64).sum();
        let bytes = units * self.cfg.workload.payload_bytes;
        self.cfg.migration.chunk_base_ticks + bytes.div_ceil(self.cfg.migration.bandwidth.max(1))
    }

    // ---- instance loop --------------------------------------------------

    fn run_instance(&mut self, i: InstanceId) -> Result<()> {
        if self.inst[i.index()].retired && !self.has_input(i) {
            return Ok(());
        }
        if self.inst[i.index()].kind == OperatorKind::Source {
            return self.run_source(i);
        }
        loop {
            let busy = self.inst[i.index()].busy_until;
            if busy > self.now {
                self.wake(i, busy);
                return Ok(());
            }
            if self.outputs_stalled(i) {
                self.inst[i.index()].stalled = true;
                return Ok(());
            }
            self.fod_serve_waiting(i)?;
            let sel = {
                let inst = &self.inst[i.index()];
                let mut current = inst.current;
                let sel = next_message(
                    &self.graph.channels,
                    &inst.inputs,
                    self.now,
                    &mut current,
                    &inst.sched,
                    |c| inst.is_blocked(c),
                    |c, m| self.is_processable(i, c, m),
                );
                (sel, current)
            };
            let (sel, current) = sel;
            self.inst[i.index()].current = current;
            match sel {
                Selection::Idle => {
                    self.end_suspension(i);
                    self.fod_unpin(i);
                    self.wake_on_next_arrival(i);
                    return Ok(());
                }
                Selection::Suspended { channel } => {
                    self.begin_suspension(i, channel);
                    self.fod_on_suspended(i, channel)?;
                    self.wake_on_next_arrival(i);
                    return Ok(());
                }
                Selection::Priority { channel } => {
                    let q = self
                        .graph
                        .channel_mut(channel)
                        .pop_priority()
                        .expect("selected priority head");
                    self.handle_message(i, channel, q)?;
                }
                Selection::Take { channel, index } => {
                    let q = self
                        .graph
                        .channel_mut(channel)
                        .take_normal_at(index)
                        .expect("selected message");
                    self.after_dequeue(channel);
                    self.end_suspension(i);
                    self.fod_unpin(i);
                    self.handle_message(i, channel, q)?;
                }
            }
        }
    }

    fn has_input(&self, i: InstanceId) -> bool {
        self.inst[i.index()]
            .inputs
            .iter()
            .any(|&c| self.graph.channel(c).has_queued_input())
    }

    fn wake_on_next_arrival(&mut self, i: InstanceId) {
        let now = self.now;
        let next = self.inst[i.index()]
            .inputs
            .iter()
            .filter_map(|&c| self.graph.channel(c).next_arrival_after(now))
            .min();
        if let Some(t) = next {
            self.wake(i, t);
        }
    }

    fn begin_suspension(&mut self, i: InstanceId, channel: ChannelId) {
        if self.inst[i.index()].suspended_since.is_none() {
            self.inst[i.index()].suspended_since = Some(self.now);
            let pos = self
                .graph
                .channel(channel)
                .normal_head(self.now)
                .map(|q| q.pos)
                .unwrap_or(0);
            self.record(
                i,
                TraceKind::SuspendBegin,
                None,
                Detail::default().channel(channel.0, pos),
            );
        }
    }

    fn end_suspension(&mut self, i: InstanceId) {
        if let Some(since) = self.inst[i.index()].suspended_since.take() {
            let span = (self.now - since) as i64;
            self.record(
                i,
                TraceKind::SuspendEnd,
                None,
                Detail::default().value(span),
            );
        }
    }

    /// Whether data record `m` on channel `ch` can be processed at `i` now.
    pub(crate) fn is_processable(&self, i: InstanceId, ch: ChannelId, m: &StreamMessage) -> bool {
        let inst = &self.inst[i.index()];
        if !inst.kind.is_stateful() {
            return true;
        }
        let Some(key) = m.key.as_deref() else {
            return true;
        };
        let kg = self.keygroup(key);
        if let Some(ok) = self.fod_processable(i, ch, key, kg) {
            return ok;
        }
        match inst.store.keygroup_status(kg) {
            Some(KeyGroupStatus::Incoming) => inst
                .incoming
                .get(&kg)
                .and_then(|s| inst.in_subs.get(s))
                .is_some_and(|s| matches!(s.gate, Gate::Universal)),
            Some(KeyGroupStatus::InactiveArrived) => {
                let Some(sub) = inst.incoming.get(&kg).and_then(|s| inst.in_subs.get(s)) else {
                    return false;
                };
                match &sub.gate {
                    Gate::Universal => true,
                    Gate::Epochs(table) => {
                        inst.sched.inter_channel
                            && table.serves(self.graph.channel(ch).sender)
                            && sub.pending.get(&kg).is_none_or(|p| p.is_empty())
                    }
                    Gate::Sync { .. } => false,
                }
            }
            _ => true,
        }
    }

    fn handle_message(&mut self, i: InstanceId, ch: ChannelId, q: Queued) -> Result<()> {
        let Queued { pos, msg, .. } = q;
        match msg.kind {
            MessageKind::Data => self.process_data(i, ch, pos, msg),
            MessageKind::Watermark => {
                self.record_delivery(i, ch, pos, &msg);
                self.on_watermark(i, ch, msg)
            }
            MessageKind::LatencyMarker => {
                if self.inst[i.index()].kind == OperatorKind::Sink {
                    let lat = self.now - msg.event_time;
                    self.latencies.push((self.now, lat));
                    self.markers_received += 1;
                    self.record(
                        i,
                        TraceKind::SinkMarker,
                        Some(msg.seq_id),
                        Detail::default().value(lat as i64),
                    );
                    Ok(())
                } else {
                    self.emit_marker(i, msg)
                }
            }
            MessageKind::TriggerBarrier => {
                self.record_delivery(i, ch, pos, &msg);
                self.on_trigger(i, msg)
            }
            MessageKind::ConfirmBarrier => {
                self.record_delivery(i, ch, pos, &msg);
                let is_sync = self.inst[i.index()]
                    .sync
                    .as_ref()
                    .is_some_and(|s| Some(s.id) == msg.subscale_id);
                if is_sync {
                    self.on_sync_barrier(i, ch, msg)
                } else {
                    self.on_confirm(i, ch, msg)
                }
            }
            MessageKind::CheckpointBarrier => {
                self.record_delivery(i, ch, pos, &msg);
                self.on_checkpoint_barrier(i, ch, msg)
            }
            other => Err(Error::ProtocolError(format!(
                "{other:?} cannot travel on a data channel"
            ))),
        }
    }

    fn record_delivery(&mut self, i: InstanceId, ch: ChannelId, pos: u64, msg: &StreamMessage) {
        let mut d = Detail::default()
            .channel(ch.0, pos)
            .from(self.graph.channel(ch).sender)
            .note(format!("{:?}", msg.kind));
        if let Some(s) = msg.subscale_id {
            d = d.subscale(s.0);
        }
        if let Some(c) = msg.checkpoint_id {
            d = d.checkpoint(c);
        }
        self.record(i, TraceKind::Deliver, Some(msg.seq_id), d);
    }

    fn process_data(
        &mut self,
        i: InstanceId,
        ch: ChannelId,
        pos: u64,
        msg: StreamMessage,
    ) -> Result<()> {
        let kind = self.inst[i.index()].kind;
        if kind == OperatorKind::Sink {
            let v = msg.payload.as_int()?;
            self.record(
                i,
                TraceKind::SinkOutput,
                Some(msg.seq_id),
                Detail::default().value(v),
            );
            self.sink_outputs
                .push((msg.key.clone().unwrap_or_default(), v));
            return Ok(());
        }
        if !kind.is_stateful() {
            return Ok(());
        }
        let key = msg
            .key
            .clone()
            .ok_or_else(|| Error::MalformedRecord("data without key".into()))?;
        let kg = self.keygroup(&key);
        let status = self.inst[i.index()].store.keygroup_status(kg);
        match status {
            Some(KeyGroupStatus::MigratedOut) if self.is_rerouting(i, kg) => {
                self.record(
                    i,
                    TraceKind::Deliver,
                    Some(msg.seq_id),
                    Detail::default().channel(ch.0, pos).kg(kg.0).note("Data"),
                );
                return self.reroute(i, msg, kg);
            }
            None if self.inst[i.index()].drops_orphans => {
                self.record(
                    i,
                    TraceKind::ProtocolError,
                    Some(msg.seq_id),
                    Detail::default().kg(kg.0).note("orphan"),
                );
                return Ok(());
            }
            None => {
                return Err(Error::ProtocolError(format!(
                    "{i} received key-group {kg} it never owned"
                )))
            }
            _ => {}
        }
        self.apply_record(i, &msg, kg, Some((ch, pos)), None)?;
        self.inst[i.index()].busy_until = self.now + self.cfg.runtime.record_cost;
        Ok(())
    }

    /// Applies a data record to operator state at `i` and emits any output.
    pub(crate) fn apply_record(
        &mut self,
        i: InstanceId,
        msg: &StreamMessage,
        kg: KeyGroupId,
        at: Option<(ChannelId, u64)>,
        note: Option<&'static str>,
    ) -> Result<()> {
        let key = msg.key.as_deref().expect("data record has a key");
        let op = self.inst[i.index()].op;
        if at.is_some() {
            self.checkpoint_log(i, kg, msg);
        }
        let output = match self.inst[i.index()].kind {
            OperatorKind::KeyedAggregate => {
                let value = msg.payload.as_int()?;
                let every = self.graph.operator(op).spec.emit_every;
                apply_sum(
                    self.inst[i.index()].store.entries_mut(kg),
                    key,
                    value,
                    every,
                )
                .map(|(sum, _)| sum)
            }
            OperatorKind::SlidingWindow => {
                let spec = self.windows[&op];
                let entries = self.inst[i.index()].store.entries_mut(kg);
                let st = entries
                    .entry(key.to_vec())
                    .or_insert(StateValue::Bytes(Vec::new()));
                window_add(st, msg.event_time, spec);
                None
            }
            _ => None,
        };
        self.applied.push(AppliedRecord {
            tick: self.now,
            instance: i,
            operator: op,
            key: key.to_vec(),
            seq: msg.seq_id,
            origin: msg.origin,
        });
        let mut d = Detail::default().key(key).kg(kg.0).from(msg.origin);
        if let Some((ch, pos)) = at {
            d = d.channel(ch.0, pos);
        }
        if let Some(n) = note {
            d = d.note(n);
        }
        self.record(i, TraceKind::Process, Some(msg.seq_id), d);
        if let Some(sum) = output {
            let seq = self.next_seq(i);
            let out = StreamMessage::data(i, seq, key.to_vec(), sum, msg.event_time);
            for to in self.route(i, key)? {
                self.send(i, to, out.clone())?;
            }
        }
        Ok(())
    }

    fn on_watermark(&mut self, i: InstanceId, ch: ChannelId, msg: StreamMessage) -> Result<()> {
        let w = msg.event_time;
        let inst = &mut self.inst[i.index()];
        if let Some(&prev) = inst.wm_in.get(&ch) {
            if w < prev {
                return Err(Error::WatermarkRegression { prev, next: w });
            }
        }
        inst.wm_in.insert(ch, w);
        if inst.kind == OperatorKind::Sink {
            return Ok(());
        }
        let inputs = inst.inputs.clone();
        let live_inputs: Vec<_> = inputs
            .into_iter()
            .filter(|c| !self.inst[self.graph.channel(*c).sender.index()].retired)
            .collect();
        let inst = &self.inst[i.index()];
        let Some(min) = live_inputs
            .iter()
            .map(|c| inst.wm_in.get(c).copied())
            .collect::<Option<Vec<_>>>()
        else {
            return Ok(());
        };
        let Some(&new_wm) = min.iter().min() else {
            return Ok(());
        };
        if inst.watermark.is_some_and(|old| new_wm <= old) {
            return Ok(());
        }
        self.inst[i.index()].watermark = Some(new_wm);
        self.fire_windows(i, new_wm)?;
        let seq = self.next_control_seq(i);
        self.broadcast(i, StreamMessage::watermark(i, seq, new_wm))
    }

    pub(crate) fn fire_windows(&mut self, i: InstanceId, wm: Tick) -> Result<()> {
        let op = self.inst[i.index()].op;
        let Some(&spec) = self.windows.get(&op) else {
            return Ok(());
        };
        let mut outputs = Vec::new();
        for kg in 0..self.graph.num_keygroups {
            let kg = KeyGroupId(kg);
            let readable = self.inst[i.index()]
                .store
                .keygroup_status(kg)
                .is_some_and(KeyGroupStatus::is_readable);
            if !readable {
                continue;
            }
            for (key, st) in self.inst[i.index()].store.entries_mut(kg).iter_mut() {
                for (_, count) in window_fire(st, wm, spec) {
                    outputs.push((key.clone(), count as i64));
                }
            }
        }
        for (key, count) in outputs {
            let seq = self.next_seq(i);
            let out = StreamMessage::data(i, seq, key.clone(), count, wm);
            for to in self.route(i, &key)? {
                self.send(i, to, out.clone())?;
            }
        }
        Ok(())
    }

    fn run_source(&mut self, i: InstanceId) -> Result<()> {
        loop {
            let Some(cursor) = self.inst[i.index()].source.as_ref() else {
                return Ok(());
            };
            if cursor.paused {
                return Ok(());
            }
            let Some(item) = cursor.peek().cloned() else {
                return Ok(());
            };
            if item.at > self.now {
                self.wake(i, item.at);
                return Ok(());
            }
            if self.outputs_stalled(i) {
                self.inst[i.index()].stalled = true;
                return Ok(());
            }
            self.inst[i.index()].source.as_mut().expect("source").next += 1;
            let seq = self.next_seq(i);
            match item.event {
                SourceEvent::Record { key, value } => {
                    self.emitted += 1;
                    self.record(i, TraceKind::Emit, Some(seq), Detail::default());
                    let msg = StreamMessage::data(i, seq, key.clone(), value, item.at);
                    for to in self.route(i, &key)? {
                        self.send(i, to, msg.clone())?;
                    }
                }
                SourceEvent::Watermark => {
                    self.broadcast(i, StreamMessage::watermark(i, seq, item.at))?
                }
                SourceEvent::Marker => {
                    self.markers_emitted += 1;
                    self.emit_marker(i, StreamMessage::marker(i, seq, item.at))?;
                }
            }
        }
    }

    pub(crate) fn resume_source(&mut self, i: InstanceId) {
        if let Some(c) = self.inst[i.index()].source.as_mut() {
            c.paused = false;
        }
        self.wake(i, self.now);
    }

    /// Whether every channel, path and instance is idle.
    pub(crate) fn is_quiescent(&self) -> bool {
        self.graph.channels.iter().all(|c| c.is_empty())
            && self.paths.iter().all(Path::is_empty)
            && self.inst.iter().all(|i| i.busy_until <= self.now)
    }

    pub(crate) fn add_instance(&mut self, op: OperatorId) -> Result<InstanceId> {
        let id = self.graph.add_instance(op);
        if id.index() != self.inst.len() {
            return Err(Error::DeployConflict(id));
        }
        let kind = self.graph.operator(op).spec.kind;
        self.inst.push(Instance::new(
            id,
            op,
            kind,
            KeyedStateStore::new(self.graph.num_keygroups),
        ));
        Ok(id)
    }
}
