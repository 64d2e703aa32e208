//! Deterministic operator logic: keyed running sums and sliding-window counts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ids::{Key, Tick};
use crate::message::{MessageKind, StreamMessage};
use crate::state::StateValue;

/// Applies `record` to the running sum in `state`. Returns the new state and,
/// every `emit_every` records of the key, the `(sum, count)` to emit.
pub fn keyed_aggregate(
    state: Option<StateValue>,
    record: &StreamMessage,
    emit_every: u64,
) -> Result<(StateValue, Option<(i64, u64)>)> {
    if record.kind != MessageKind::Data {
        return Err(Error::MalformedRecord(format!(
            "{:?} is not a data record",
            record.kind
        )));
    }
    let value = record.payload.as_int()?;
    let (sum, count) = match state {
        None => (value, 1),
        Some(StateValue::Sum { sum, count }) => (sum + value, count + 1),
        Some(other) => {
            return Err(Error::MalformedRecord(format!(
                "state {other:?} is not a running sum"
            )))
        }
    };
    let out = (emit_every > 0 && count % emit_every == 0).then_some((sum, count));
    Ok((StateValue::Sum { sum, count }, out))
}

/// In-place variant over a key-group's entries.
pub fn apply_sum(
    entries: &mut BTreeMap<Key, StateValue>,
    key: &[u8],
    value: i64,
    emit_every: u64,
) -> Option<(i64, u64)> {
    let slot = entries
        .entry(key.to_vec())
        .or_insert(StateValue::Sum { sum: 0, count: 0 });
    match slot {
        StateValue::Sum { sum, count } => {
            *sum += value;
            *count += 1;
            (emit_every > 0 && *count % emit_every == 0).then_some((*sum, *count))
        }
        other => {
            *other = StateValue::Sum {
                sum: value,
                count: 1,
            };
            None
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: Tick,
    pub slide: Tick,
}

impl WindowSpec {
    pub fn new(size: Tick, slide: Tick) -> Result<Self> {
        if slide == 0 || size == 0 || !size.is_multiple_of(slide) {
            return Err(Error::Config(format!(
                "window size {size} must be a positive multiple of slide {slide}"
            )));
        }
        Ok(WindowSpec { size, slide })
    }
}

/// Adds one event at `t` to a key's pane counts.
pub fn window_add(state: &mut StateValue, t: Tick, spec: WindowSpec) {
    if !matches!(state, StateValue::Panes { .. }) {
        *state = StateValue::Panes {
            panes: BTreeMap::new(),
            fired_until: 0,
        };
    }
    if let StateValue::Panes { panes, .. } = state {
        *panes.entry(t / spec.slide * spec.slide).or_default() += 1;
    }
}

/// Fires every window `[start, start + size)` with `start + size - 1 <=
/// watermark` that has not fired yet. Returns `(start, count)` for non-empty
/// windows and prunes panes no later window needs.
pub fn window_fire(state: &mut StateValue, watermark: Tick, spec: WindowSpec) -> Vec<(Tick, u64)> {
    let StateValue::Panes { panes, fired_until } = state else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let Some(&first) = panes.keys().next() else {
        return out;
    };
    let earliest = (first + spec.slide).saturating_sub(spec.size);
    let mut start = (*fired_until).max(earliest);
    while start + spec.size <= watermark + 1 {
        let count: u64 = panes.range(start..start + spec.size).map(|(_, c)| c).sum();
        if count > 0 {
            out.push((start, count));
        }
        start += spec.slide;
        if panes.range(start..).next().is_none() {
            break;
        }
    }
    if start > *fired_until {
        *fired_until = start;
    }
    let keep = *fired_until;
    panes.retain(|&p, _| p >= keep);
    out
}

/// A single-instance sliding-window counter over a stream of records and
/// watermarks.
#[derive(Clone, Debug)]
pub struct SlidingWindow {
    pub spec: WindowSpec,
    watermark: Option<Tick>,
    keys: BTreeMap<Key, StateValue>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WindowInput<'a> {
    Record { key: &'a [u8], time: Tick },
    Watermark(Tick),
}

impl SlidingWindow {
    pub fn new(spec: WindowSpec) -> Self {
        SlidingWindow {
            spec,
            watermark: None,
            keys: BTreeMap::new(),
        }
    }

    /// Feeds one input; returns fired `(key, window start, count)` triples.
    pub fn sliding_window(&mut self, input: WindowInput<'_>) -> Result<Vec<(Key, Tick, u64)>> {
        match input {
            WindowInput::Record { key, time } => {
                let st = self.keys.entry(key.to_vec()).or_insert(StateValue::Panes {
                    panes: BTreeMap::new(),
                    fired_until: 0,
                });
                window_add(st, time, self.spec);
                Ok(Vec::new())
            }
            WindowInput::Watermark(w) => {
                if let Some(prev) = self.watermark {
                    if w < prev {
                        return Err(Error::WatermarkRegression { prev, next: w });
                    }
                }
                self.watermark = Some(w);
                let mut out = Vec::new();
                for (k, st) in &mut self.keys {
                    for (start, count) in window_fire(st, w, self.spec) {
                        out.push((k.clone(), start, count));
                    }
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::InstanceId;

    fn rec(v: i64) -> StreamMessage {
        StreamMessage::data(InstanceId(0), 0, b"k".to_vec(), v, 0)
    }

    #[test]
    fn sums_and_counts() {
        let mut st = None;
        for v in [2, 3, 5] {
            st = Some(keyed_aggregate(st, &rec(v), 0).unwrap().0);
        }
        assert_eq!(st, Some(StateValue::Sum { sum: 10, count: 3 }));
        assert_eq!(
            keyed_aggregate(None, &rec(7), 1).unwrap(),
            (StateValue::Sum { sum: 7, count: 1 }, Some((7, 1)))
        );
    }

    #[test]
    fn malformed_payload_is_rejected() {
        let mut m = rec(1);
        m.payload = crate::message::Payload::Bytes(vec![1, 2]);
        assert!(matches!(
            keyed_aggregate(None, &m, 1),
            Err(Error::MalformedRecord(_))
        ));
    }

    fn brute_windows(events: &[Tick], spec: WindowSpec, wm: Tick) -> Vec<(Tick, u64)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start + spec.size <= wm + 1 {
            let c = events
                .iter()
                .filter(|&&t| t >= start && t < start + spec.size)
                .count() as u64;
            if c > 0 {
                out.push((start, c));
            }
            start += spec.slide;
        }
        out
    }

    #[test]
    fn windows_match_brute_force() {
        let spec = WindowSpec::new(10, 5).unwrap();
        let mut w = SlidingWindow::new(spec);
        for t in [1, 6, 11] {
            w.sliding_window(WindowInput::Record { key: b"k", time: t })
                .unwrap();
        }
        let fired: Vec<_> = w
            .sliding_window(WindowInput::Watermark(20))
            .unwrap()
            .into_iter()
            .map(|(_, s, c)| (s, c))
            .collect();
        assert_eq!(fired, brute_windows(&[1, 6, 11], spec, 20));
        assert_eq!(&fired[..2], &[(0, 2), (5, 2)]);
        assert!(w
            .sliding_window(WindowInput::Watermark(30))
            .unwrap()
            .is_empty());
        assert!(matches!(
            w.sliding_window(WindowInput::Watermark(3)),
            Err(Error::WatermarkRegression { prev: 30, next: 3 })
        ));
    }

    #[test]
    fn no_events_no_outputs() {
        let mut w = SlidingWindow::new(WindowSpec::new(10, 5).unwrap());
        assert!(w
            .sliding_window(WindowInput::Watermark(100))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn incremental_firing_equals_one_shot() {
        let spec = WindowSpec::new(20, 5).unwrap();
        let events = [0, 3, 4, 9, 17, 18, 25, 40, 41, 60];
        let mut st = StateValue::Bytes(vec![]);
        let mut got = Vec::new();
        let mut i = 0;
        for wm in (0..80).step_by(7) {
            while i < events.len() && events[i] <= wm {
                window_add(&mut st, events[i], spec);
                i += 1;
            }
            got.extend(window_fire(&mut st, wm, spec));
        }
        assert_eq!(got, brute_windows(&events, spec, 77));
    }
}
