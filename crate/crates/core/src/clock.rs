//! Virtual clock and pending-event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::ids::{InstanceId, Tick};

struct Pending<E> {
    at: Tick,
    instance: InstanceId,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<E> Eq for Pending<E> {}
impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Pending<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        other.key().cmp(&self.key())
    }
}
impl<E> Pending<E> {
    fn key(&self) -> (Tick, InstanceId, u64) {
        (self.at, self.instance, self.seq)
    }
}

/// Pending events ordered by `(time, instance, insertion sequence)`.
pub struct VirtualClock<E> {
    now: Tick,
    pending: BinaryHeap<Pending<E>>,
    next_seq: u64,
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        VirtualClock {
            now: 0,
            pending: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Schedules `event` for `instance` at `at`; times in the past are
    /// clamped to now so time never decreases.
    pub fn schedule(&mut self, at: Tick, instance: InstanceId, event: E) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Pending {
            at: at.max(self.now),
            instance,
            seq,
            event,
        });
    }

    pub fn is_drained(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn peek_time(&self) -> Option<Tick> {
        self.pending.peek().map(|p| p.at)
    }

    /// Pops the next event and advances the clock to its time.
    pub fn step(&mut self) -> Result<(Tick, InstanceId, E)> {
        let p = self.pending.pop().ok_or(Error::SimulationDrained)?;
        self.now = p.at;
        Ok((p.at, p.instance, p.event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_event_advances_clock() {
        let mut c = VirtualClock::new();
        c.schedule(5, InstanceId(0), "deliver");
        let (t, _, e) = c.step().unwrap();
        assert_eq!((t, e, c.now()), (5, "deliver", 5));
    }

    #[test]
    fn ties_break_by_instance_then_insertion() {
        let mut c = VirtualClock::new();
        c.schedule(3, InstanceId(2), "b");
        c.schedule(3, InstanceId(1), "a2");
        c.schedule(3, InstanceId(1), "a3");
        c.schedule(1, InstanceId(9), "first");
        let order: Vec<_> = std::iter::from_fn(|| c.step().ok().map(|x| x.2)).collect();
        assert_eq!(order, vec!["first", "a2", "a3", "b"]);
    }

    #[test]
    fn drained_clock_errors() {
        let mut c: VirtualClock<()> = VirtualClock::new();
        assert_eq!(c.step().unwrap_err(), Error::SimulationDrained);
    }

    #[test]
    fn past_events_are_clamped() {
        let mut c = VirtualClock::new();
        c.schedule(10, InstanceId(0), 1);
        c.step().unwrap();
        c.schedule(3, InstanceId(0), 2);
        assert_eq!(c.step().unwrap().0, 10);
    }
}
