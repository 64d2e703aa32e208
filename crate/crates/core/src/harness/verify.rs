//! Output equivalence against a reference run, and trace invariant audits.

use std::collections::{BTreeMap, BTreeSet};

use crate::ids::{SeqId, Tick};
use crate::sim::RunResult;
use crate::trace::{Trace, TraceKind};

const MAX_DIFFS: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EquivalenceVerdict {
    pub per_key_state_equal: bool,
    pub per_channel_order_equal: bool,
    pub exactly_once: bool,
    pub diffs: Vec<String>,
}

impl EquivalenceVerdict {
    pub fn passed(&self) -> bool {
        self.per_key_state_equal && self.per_channel_order_equal && self.exactly_once
    }
}

type OrderKey = (u32, Vec<u8>, u32);

/// Applied sequence ids per `(operator, key, origin)`, in application order.
fn delivered_order(run: &RunResult) -> BTreeMap<OrderKey, Vec<SeqId>> {
    let mut out: BTreeMap<OrderKey, Vec<SeqId>> = BTreeMap::new();
    for a in &run.applied {
        out.entry((a.operator.0, a.key.clone(), a.origin.0))
            .or_default()
            .push(a.seq);
    }
    out
}

fn census(run: &RunResult) -> BTreeMap<(u32, u32, SeqId), u32> {
    let mut out = BTreeMap::new();
    for a in &run.applied {
        *out.entry((a.operator.0, a.origin.0, a.seq)).or_default() += 1;
    }
    out
}

fn push(diffs: &mut Vec<String>, msg: String) {
    if diffs.len() < MAX_DIFFS {
        diffs.push(msg);
    }
}

/// Compares `run` against `reference`, normally the same workload without
/// scaling.
pub fn equivalence_check(run: &RunResult, reference: &RunResult) -> EquivalenceVerdict {
    let mut diffs = Vec::new();

    let mut state_equal = true;
    let ops: BTreeSet<&String> = run
        .final_state
        .keys()
        .chain(reference.final_state.keys())
        .collect();
    let empty = BTreeMap::new();
    for op in ops {
        let a = run.final_state.get(op).unwrap_or(&empty);
        let b = reference.final_state.get(op).unwrap_or(&empty);
        for key in a.keys().chain(b.keys()).collect::<BTreeSet<_>>() {
            if a.get(key) != b.get(key) {
                state_equal = false;
                push(
                    &mut diffs,
                    format!(
                        "state {op}/{}: {:?} vs {:?}",
                        String::from_utf8_lossy(key),
                        a.get(key),
                        b.get(key)
                    ),
                );
            }
        }
    }

    let mut order_equal = true;
    let oa = delivered_order(run);
    let ob = delivered_order(reference);
    for k in oa.keys().chain(ob.keys()).collect::<BTreeSet<_>>() {
        if oa.get(k) != ob.get(k) {
            order_equal = false;
            push(
                &mut diffs,
                format!(
                    "order op{} key {} from {}",
                    k.0,
                    String::from_utf8_lossy(&k.1),
                    k.2
                ),
            );
        }
    }

    let ca = census(run);
    let cb = census(reference);
    let mut once = true;
    for (id, n) in &ca {
        if *n != 1 {
            once = false;
            push(&mut diffs, format!("record {id:?} applied {n} times"));
        }
    }
    for id in cb.keys() {
        if !ca.contains_key(id) {
            once = false;
            push(&mut diffs, format!("record {id:?} never applied"));
        }
    }
    for id in ca.keys() {
        if !cb.contains_key(id) {
            once = false;
            push(&mut diffs, format!("record {id:?} is not in the reference"));
        }
    }

    EquivalenceVerdict {
        per_key_state_equal: state_equal,
        per_channel_order_equal: order_equal,
        exactly_once: once,
        diffs,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub tick: Tick,
    pub instance: u32,
    pub what: String,
}

fn violation(tick: Tick, instance: u32, what: String) -> Violation {
    Violation {
        tick,
        instance,
        what,
    }
}

/// No message is taken across a watermark or barrier on its channel.
pub fn check_watermark_safety(trace: &Trace) -> Vec<Violation> {
    #[derive(Default)]
    struct Lane {
        max_taken: Option<u64>,
        floor: Option<u64>,
    }
    let mut lanes: BTreeMap<u32, Lane> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &trace.events {
        if !matches!(e.kind, TraceKind::Deliver | TraceKind::Process) {
            continue;
        }
        let (Some(ch), Some(pos)) = (e.detail.channel, e.detail.pos) else {
            continue;
        };
        let note = e.detail.note.as_deref().unwrap_or("");
        if note == "TriggerBarrier" {
            continue;
        }
        let signal = e.kind == TraceKind::Deliver
            && matches!(note, "Watermark" | "ConfirmBarrier" | "CheckpointBarrier");
        let lane = lanes.entry(ch).or_default();
        if lane.floor.is_some_and(|f| pos < f) {
            out.push(violation(
                e.tick,
                e.instance,
                format!("channel {ch} pos {pos} taken after a later signal"),
            ));
        }
        if signal {
            if lane.max_taken.is_some_and(|m| m > pos) {
                out.push(violation(
                    e.tick,
                    e.instance,
                    format!("channel {ch} signal at {pos} overtaken"),
                ));
            }
            lane.floor = Some(lane.floor.map_or(pos, |f| f.max(pos)));
        }
        lane.max_taken = Some(lane.max_taken.map_or(pos, |m| m.max(pos)));
    }
    out
}

/// Concurrent subscales touch disjoint key-groups, each key-group's
/// migration stays within its subscale's lifetime, and a key-group is only
/// activated after its state was installed.
pub fn check_subscale_isolation(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut injected: BTreeMap<u32, Tick> = BTreeMap::new();
    let mut completed: BTreeMap<u32, Tick> = BTreeMap::new();
    let mut kgs: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut installed: BTreeSet<(u32, u32)> = BTreeSet::new();
    for e in &trace.events {
        let Some(s) = e.detail.subscale else { continue };
        match e.kind {
            TraceKind::Inject => {
                injected.entry(s).or_insert(e.tick);
            }
            TraceKind::SubscaleComplete => {
                completed.entry(s).or_insert(e.tick);
            }
            TraceKind::Chunk | TraceKind::ChunkInstall | TraceKind::Activate => {
                let Some(kg) = e.detail.kg else { continue };
                if !injected.contains_key(&s) {
                    out.push(violation(
                        e.tick,
                        e.instance,
                        format!("subscale {s} moves kg {kg} before injection"),
                    ));
                }
                if completed.contains_key(&s) {
                    out.push(violation(
                        e.tick,
                        e.instance,
                        format!("subscale {s} moves kg {kg} after completion"),
                    ));
                }
                kgs.entry(s).or_default().insert(kg);
                match e.kind {
                    TraceKind::ChunkInstall => {
                        installed.insert((s, kg));
                    }
                    TraceKind::Activate if !installed.contains(&(s, kg)) => {
                        out.push(violation(
                            e.tick,
                            e.instance,
                            format!("kg {kg} activated before install"),
                        ));
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    let ids: Vec<u32> = kgs.keys().copied().collect();
    for (n, &a) in ids.iter().enumerate() {
        for &b in &ids[n + 1..] {
            let span = |s: u32| {
                (
                    injected.get(&s).copied().unwrap_or(0),
                    completed.get(&s).copied().unwrap_or(Tick::MAX),
                )
            };
            let (a0, a1) = span(a);
            let (b0, b1) = span(b);
            if a0 < b1 && b0 < a1 {
                if let Some(kg) = kgs[&a].intersection(&kgs[&b]).next() {
                    out.push(violation(
                        a0.max(b0),
                        0,
                        format!("concurrent subscales {a} and {b} share kg {kg}"),
                    ));
                }
            }
        }
    }
    out
}

/// For every subscale, the scaling instance emits its first state chunk
/// before it processes any record its predecessors emitted after injection.
pub fn check_trigger_priority(trace: &Trace) -> Vec<Violation> {
    let mut emitted: BTreeMap<(u32, SeqId), Tick> = BTreeMap::new();
    for e in trace.of_kind(TraceKind::Emit) {
        if let Some(seq) = e.seq_id {
            emitted.insert((e.instance, seq), e.tick);
        }
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for inj in trace.of_kind(TraceKind::Inject) {
        let Some(s) = inj.detail.subscale else {
            continue;
        };
        if !seen.insert(s) {
            continue;
        }
        let chunk = trace
            .of_kind(TraceKind::Chunk)
            .find(|e| e.detail.subscale == Some(s))
            .map(|e| e.tick);
        let later = trace.of_kind(TraceKind::Process).find(|e| {
            e.instance == inj.instance
                && e.tick >= inj.tick
                && match (e.detail.from, e.seq_id) {
                    (Some(o), Some(seq)) => emitted.get(&(o, seq)).is_some_and(|&t| t >= inj.tick),
                    _ => false,
                }
        });
        match (chunk, later) {
            (Some(c), Some(p)) if c >= p.tick => out.push(violation(
                p.tick,
                inj.instance,
                format!(
                    "subscale {s} first chunk at {c}, post-injection record processed at {}",
                    p.tick
                ),
            )),
            (None, Some(p)) => out.push(violation(
                p.tick,
                inj.instance,
                format!("subscale {s} emitted no chunk"),
            )),
            _ => {}
        }
    }
    out
}

/// Within one scaling session, the instances reading a key-group take
/// turns: each reader's span of processing ticks is disjoint from the
/// others'.
pub fn check_single_reader(trace: &Trace) -> Vec<Violation> {
    let mut spans: BTreeMap<(u32, u32), (Tick, Tick)> = BTreeMap::new();
    for e in trace.of_kind(TraceKind::Process) {
        let Some(kg) = e.detail.kg else { continue };
        let span = spans.entry((kg, e.instance)).or_insert((e.tick, e.tick));
        span.1 = e.tick;
    }
    let mut out = Vec::new();
    let mut by_kg: BTreeMap<u32, Vec<(u32, Tick, Tick)>> = BTreeMap::new();
    for ((kg, i), (a, b)) in spans {
        by_kg.entry(kg).or_default().push((i, a, b));
    }
    for (kg, readers) in by_kg {
        for (n, &(i, a0, a1)) in readers.iter().enumerate() {
            for &(j, b0, b1) in &readers[n + 1..] {
                if a0 < b1 && b0 < a1 {
                    out.push(violation(
                        a0.max(b0),
                        i,
                        format!(
                            "kg {kg} read by {i} during [{a0},{a1}] and by {j} during [{b0},{b1}]"
                        ),
                    ));
                }
            }
        }
    }
    out
}

/// Each predecessor's epoch flips at most once per subscale at a target.
pub fn check_epoch_monotonicity(trace: &Trace) -> Vec<Violation> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for e in trace.of_kind(TraceKind::EpochFlip) {
        let (Some(s), Some(from)) = (e.detail.subscale, e.detail.from) else {
            continue;
        };
        if !seen.insert((e.instance, s, from)) {
            out.push(violation(
                e.tick,
                e.instance,
                format!("subscale {s} flipped twice for {from}"),
            ));
        }
    }
    out
}

/// Rerouted records per subscale never exceed what the source could hold
/// in its input buffers (`input_capacity`) plus the records it took in
/// between the subscale's trigger and its last confirm.
pub fn check_reroute_bound(trace: &Trace, input_capacity: usize) -> Vec<Violation> {
    let mut window: BTreeMap<u32, (u32, usize, usize)> = BTreeMap::new();
    for (n, e) in trace.events.iter().enumerate() {
        let Some(s) = e.detail.subscale else { continue };
        match e.kind {
            TraceKind::Trigger => {
                window.entry(s).or_insert((e.instance, n, n));
            }
            TraceKind::Confirm => {
                if let Some(w) = window.get_mut(&s) {
                    w.2 = n;
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (s, (source, from, to)) in window {
        let taken = trace.events[from..=to]
            .iter()
            .filter(|e| {
                e.instance == source && matches!(e.kind, TraceKind::Process | TraceKind::Reroute)
            })
            .count();
        let rerouted = trace
            .of_kind(TraceKind::Reroute)
            .filter(|e| e.detail.subscale == Some(s))
            .count();
        if rerouted > taken + input_capacity {
            out.push(violation(
                trace.events[to].tick,
                source,
                format!(
                    "subscale {s} rerouted {rerouted} records, bound {}",
                    taken + input_capacity
                ),
            ));
        }
    }
    out
}

/// Every invariant audit that applies to an authoritative run.
pub fn audit(trace: &Trace) -> Vec<Violation> {
    let mut out = check_watermark_safety(trace);
    out.extend(check_subscale_isolation(trace));
    out.extend(check_epoch_monotonicity(trace));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;
    use crate::trace::Detail;

    fn deliver(t: &mut Trace, ch: u32, pos: u64, note: &str) {
        t.record(
            1,
            InstanceId(1),
            TraceKind::Deliver,
            None,
            Detail::default().channel(ch, pos).note(note),
        );
    }

    fn process(t: &mut Trace, ch: u32, pos: u64) {
        t.record(
            1,
            InstanceId(1),
            TraceKind::Process,
            None,
            Detail::default().channel(ch, pos),
        );
    }

    #[test]
    fn in_order_lane_is_safe() {
        let mut t = Trace::default();
        process(&mut t, 0, 0);
        process(&mut t, 0, 2);
        process(&mut t, 0, 1);
        deliver(&mut t, 0, 3, "Watermark");
        process(&mut t, 0, 4);
        assert!(check_watermark_safety(&t).is_empty());
    }

    #[test]
    fn skipping_a_watermark_is_caught() {
        let mut t = Trace::default();
        process(&mut t, 0, 0);
        process(&mut t, 0, 2);
        deliver(&mut t, 0, 1, "Watermark");
        assert_eq!(check_watermark_safety(&t).len(), 1);

        let mut t = Trace::default();
        deliver(&mut t, 0, 1, "ConfirmBarrier");
        process(&mut t, 0, 0);
        assert_eq!(check_watermark_safety(&t).len(), 1);
    }

    #[test]
    fn overlapping_subscales_on_one_kg_are_caught() {
        let mut t = Trace::default();
        let sub = |s: u32| Detail::default().subscale(s);
        t.record(1, InstanceId(1), TraceKind::Inject, None, sub(0));
        t.record(1, InstanceId(1), TraceKind::Inject, None, sub(1));
        t.record(2, InstanceId(1), TraceKind::Chunk, None, sub(0).kg(4));
        t.record(3, InstanceId(1), TraceKind::Chunk, None, sub(1).kg(4));
        let v = check_subscale_isolation(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].what.contains("share kg 4"));
    }

    #[test]
    fn overlapping_readers_are_caught() {
        let mut t = Trace::default();
        let kg = || Detail::default().kg(3);
        t.record(1, InstanceId(1), TraceKind::Process, None, kg());
        t.record(5, InstanceId(2), TraceKind::Process, None, kg());
        t.record(9, InstanceId(2), TraceKind::Process, None, kg());
        assert!(check_single_reader(&t).is_empty());
        t.record(7, InstanceId(1), TraceKind::Process, None, kg());
        assert_eq!(check_single_reader(&t).len(), 1);
    }

    #[test]
    fn double_flip_is_caught() {
        let mut t = Trace::default();
        let flip = || Detail::default().subscale(2).from(InstanceId(0));
        t.record(1, InstanceId(4), TraceKind::EpochFlip, None, flip());
        assert!(check_epoch_monotonicity(&t).is_empty());
        t.record(2, InstanceId(4), TraceKind::EpochFlip, None, flip());
        assert_eq!(check_epoch_monotonicity(&t).len(), 1);
    }

    #[test]
    fn activation_requires_install() {
        let mut t = Trace::default();
        let sub = Detail::default().subscale(0);
        t.record(1, InstanceId(1), TraceKind::Inject, None, sub.clone());
        t.record(
            2,
            InstanceId(2),
            TraceKind::Activate,
            None,
            sub.clone().kg(1),
        );
        assert_eq!(check_subscale_isolation(&t).len(), 1);
    }
}
