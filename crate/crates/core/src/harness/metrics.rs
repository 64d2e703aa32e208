//! Latency decomposition and scaling metrics computed from a finished run.
//!
//! Overhead components are kept in milliticks so that the mean dependency
//! overhead stays exact and `l_p + l_s + l_d + l_o == l_total` holds as an
//! integer identity.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::ids::Tick;
use crate::protocol::ProtocolChoice;
use crate::sim::RunResult;
use crate::trace::{Trace, TraceKind};

/// A unit of migrated state: a whole key-group, or one part of it when
/// state is fetched piecemeal.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MigrationUnit {
    pub kg: u32,
    pub part: Option<u32>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SuspensionEvent {
    pub instance: u32,
    pub begin: Tick,
    pub span: Tick,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub protocol: ProtocolChoice,
    pub seed: u64,
    /// Span from the first injection to the end of the last session.
    pub l_total: i64,
    pub l_p: i64,
    pub l_s: i64,
    pub l_d: i64,
    pub l_o: i64,
    pub latency_series: Vec<(Tick, Tick)>,
    pub throughput_series: Vec<(Tick, u64)>,
    pub scaling_duration: Tick,
    pub peak_latency: Tick,
    /// Mean marker latency in milliticks.
    pub avg_latency: i64,
    /// Mean marker latency before the first injection, in milliticks.
    pub baseline_latency: i64,
    pub migrations_per_kg: BTreeMap<MigrationUnit, u32>,
    pub reroute_count: u64,
    pub suspension_events: Vec<SuspensionEvent>,
}

pub const CSV_HEADER: &str =
    "scenario,protocol,seed,peak_latency,avg_latency,scaling_duration,L_p,L_s,L_d,L_o,reroutes,migrations";

/// Formats a millitick quantity as ticks with three decimals.
pub fn ticks(milli: i64) -> String {
    let sign = if milli < 0 { "-" } else { "" };
    let m = milli.unsigned_abs();
    format!("{sign}{}.{:03}", m / 1000, m % 1000)
}

impl MetricsReport {
    pub fn migrations(&self) -> u64 {
        self.migrations_per_kg.values().map(|&n| n as u64).sum()
    }

    pub fn max_migrations_per_unit(&self) -> u32 {
        self.migrations_per_kg.values().copied().max().unwrap_or(0)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.protocol.name(),
            self.seed,
            self.peak_latency,
            ticks(self.avg_latency),
            self.scaling_duration,
            ticks(self.l_p),
            ticks(self.l_s),
            ticks(self.l_d),
            ticks(self.l_o),
            self.reroute_count,
            self.migrations(),
        )
    }

    pub fn write_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in reports {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn identity_holds(&self) -> bool {
        self.l_p + self.l_s + self.l_d + self.l_o == self.l_total
    }
}

/// Mean in milliticks, rounded toward zero.
fn mean_milli(values: &[Tick]) -> i64 {
    if values.is_empty() {
        return 0;
    }
    let total: u128 = values.iter().map(|&v| v as u128).sum();
    (total * 1000 / values.len() as u128) as i64
}

/// Mean marker latency per `bucket` ticks, in milliticks, keyed by the
/// bucket's start tick.
pub fn bucket_means(latencies: &[(Tick, Tick)], bucket: Tick) -> Vec<(Tick, i64)> {
    let bucket = bucket.max(1);
    let mut sums: BTreeMap<Tick, (u128, u128)> = BTreeMap::new();
    for &(at, lat) in latencies {
        let slot = sums.entry(at / bucket * bucket).or_default();
        slot.0 += lat as u128;
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(t, (sum, n))| (t, (sum * 1000 / n) as i64))
        .collect()
}

/// Ticks from `start` until the bucketed mean latency stays within
/// `threshold * baseline` for `window` ticks.
pub fn stabilization(
    means: &[(Tick, i64)],
    bucket: Tick,
    start: Tick,
    baseline_milli: i64,
    threshold: f64,
    window: Tick,
) -> Tick {
    let limit = baseline_milli as f64 * threshold;
    let mut settled = start;
    for &(at, mean) in means.iter().filter(|(at, _)| at + bucket > start) {
        if mean as f64 <= limit {
            continue;
        }
        let end = at + bucket;
        if at > settled && at - settled > window {
            break;
        }
        settled = settled.max(end);
    }
    settled - start
}

/// Derives a report from a finished run.
pub fn compute_metrics(run: &RunResult) -> Result<MetricsReport> {
    let trace = &run.trace;
    let started = trace.of_kind(TraceKind::SessionStart).count();
    let mut injected: BTreeMap<u32, Tick> = BTreeMap::new();
    for e in trace.of_kind(TraceKind::Inject) {
        if let Some(s) = e.detail.subscale {
            injected.entry(s).or_insert(e.tick);
        }
    }
    if started > 0
        && injected.is_empty()
        && run.sessions.iter().any(|s| !s.plan.subscales.is_empty())
    {
        return Err(Error::IncompleteTrace);
    }

    let mut first_chunk: BTreeMap<u32, Tick> = BTreeMap::new();
    let mut kg_chunk: BTreeMap<u32, (u32, Tick)> = BTreeMap::new();
    let mut migrations: BTreeMap<MigrationUnit, u32> = BTreeMap::new();
    for e in &trace.events {
        match e.kind {
            TraceKind::Chunk => {
                let (Some(s), Some(kg)) = (e.detail.subscale, e.detail.kg) else {
                    continue;
                };
                first_chunk.entry(s).or_insert(e.tick);
                kg_chunk.entry(kg).or_insert((s, e.tick));
                *migrations
                    .entry(MigrationUnit { kg, part: None })
                    .or_default() += 1;
            }
            TraceKind::FetchTransfer => {
                let Some(kg) = e.detail.kg else { continue };
                let part = e.detail.value.map(|v| v as u32);
                *migrations.entry(MigrationUnit { kg, part }).or_default() += 1;
            }
            _ => {}
        }
    }

    let l_p: i64 = first_chunk
        .iter()
        .filter_map(|(s, &c)| injected.get(s).map(|&i| c.saturating_sub(i) as i64))
        .sum::<i64>()
        * 1000;
    let deps: Vec<Tick> = kg_chunk
        .values()
        .filter_map(|&(s, c)| injected.get(&s).map(|&i| c.saturating_sub(i)))
        .collect();
    let l_d = mean_milli(&deps);

    let suspension_events = suspensions(trace, run.end_tick);
    let l_s: i64 = suspension_events.iter().map(|s| s.span as i64).sum::<i64>() * 1000;

    let first_inject = injected.values().copied().min();
    let last_end = run
        .sessions
        .iter()
        .map(|s| s.ended_at.unwrap_or(run.end_tick))
        .max();
    let l_total = match (first_inject, last_end) {
        (Some(a), Some(b)) => b.saturating_sub(a) as i64 * 1000,
        _ => 0,
    };

    let lat: Vec<Tick> = run.latencies.iter().map(|&(_, l)| l).collect();
    let before: Vec<Tick> = run
        .latencies
        .iter()
        .filter(|(at, _)| first_inject.is_none_or(|i| *at < i))
        .map(|&(_, l)| l)
        .collect();
    let baseline_latency = mean_milli(&before);
    let means = bucket_means(&run.latencies, run.throughput_bucket);
    let scaling_duration = match first_inject {
        Some(i) => stabilization(
            &means,
            run.throughput_bucket,
            i,
            baseline_latency,
            run.stab_threshold,
            run.stab_window,
        ),
        None => 0,
    };

    Ok(MetricsReport {
        scenario: run.name.clone(),
        protocol: run.protocol,
        seed: run.seed,
        l_total,
        l_p,
        l_s,
        l_d,
        l_o: l_total - l_p - l_s - l_d,
        latency_series: run.latencies.clone(),
        throughput_series: throughput(trace, run.throughput_bucket),
        scaling_duration,
        peak_latency: lat.iter().copied().max().unwrap_or(0),
        avg_latency: mean_milli(&lat),
        baseline_latency,
        migrations_per_kg: migrations,
        reroute_count: trace.of_kind(TraceKind::Reroute).count() as u64,
        suspension_events,
    })
}

/// Suspension spans; one still open at the end of the run is closed there.
fn suspensions(trace: &Trace, end: Tick) -> Vec<SuspensionEvent> {
    let mut open: BTreeMap<u32, Tick> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &trace.events {
        match e.kind {
            TraceKind::SuspendBegin => {
                open.insert(e.instance, e.tick);
            }
            TraceKind::SuspendEnd => {
                if let Some(begin) = open.remove(&e.instance) {
                    out.push(SuspensionEvent {
                        instance: e.instance,
                        begin,
                        span: e.tick - begin,
                    });
                }
            }
            _ => {}
        }
    }
    for (instance, begin) in open {
        out.push(SuspensionEvent {
            instance,
            begin,
            span: end.saturating_sub(begin),
        });
    }
    out
}

fn throughput(trace: &Trace, bucket: Tick) -> Vec<(Tick, u64)> {
    let bucket = bucket.max(1);
    let mut counts: BTreeMap<Tick, u64> = BTreeMap::new();
    for e in trace.of_kind(TraceKind::Emit) {
        *counts.entry(e.tick / bucket * bucket).or_default() += 1;
    }
    counts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milli_formatting() {
        assert_eq!(ticks(3000), "3.000");
        assert_eq!(ticks(1234), "1.234");
        assert_eq!(ticks(-5), "-0.005");
    }

    #[test]
    fn bucket_means_average_within_buckets() {
        let lat = vec![(5, 2), (7, 4), (12, 9)];
        assert_eq!(bucket_means(&lat, 10), vec![(0, 3000), (10, 9000)]);
    }

    #[test]
    fn stabilization_waits_for_a_quiet_window() {
        let means = vec![
            (90, 10_000),
            (100, 30_000),
            (110, 10_000),
            (120, 30_000),
            (130, 10_000),
            (140, 10_000),
        ];
        assert_eq!(stabilization(&means, 10, 100, 10_000, 1.1, 20), 30);
        assert_eq!(stabilization(&means, 10, 100, 10_000, 1.1, 5), 10);
        assert_eq!(stabilization(&[], 10, 100, 10_000, 1.1, 20), 0);
    }

    #[test]
    fn late_spike_after_a_quiet_window_is_ignored() {
        let means = vec![(100, 30_000), (300, 30_000)];
        assert_eq!(stabilization(&means, 10, 100, 10_000, 1.1, 50), 10);
    }

    #[test]
    fn mean_rounds_toward_zero() {
        assert_eq!(mean_milli(&[1, 2]), 1500);
        assert_eq!(mean_milli(&[1, 1, 2]), 1333);
        assert_eq!(mean_milli(&[]), 0);
    }
}
