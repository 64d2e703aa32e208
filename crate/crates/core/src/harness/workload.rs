//! Seeded keyed workload generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Key, Tick};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    /// Records per 1000 ticks across all sources.
    pub rate: u64,
    pub duration: Tick,
    pub key_space: u64,
    pub zipf_s: f64,
    /// State bytes per key, used to size state chunks.
    pub payload_bytes: u64,
    pub seed: u64,
    /// Latency marker period per source; 0 disables markers.
    pub marker_period: Tick,
    /// Watermark period per source; 0 disables watermarks.
    pub watermark_interval: Tick,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            rate: 500,
            duration: 10_000,
            key_space: 1000,
            zipf_s: 1.0,
            payload_bytes: 64,
            seed: 1,
            marker_period: 50,
            watermark_interval: 100,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::Config("rate must be positive".into()));
        }
        if self.zipf_s.is_nan() || self.zipf_s < 0.0 {
            return Err(Error::Config("zipf_s must be non-negative".into()));
        }
        if self.key_space == 0 {
            return Err(Error::Config("key_space must be positive".into()));
        }
        Ok(())
    }

    pub fn record_count(&self) -> u64 {
        self.rate * self.duration / 1000
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SourceEvent {
    Record { key: Key, value: i64 },
    Watermark,
    Marker,
}

/// One scheduled emission of a source instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceItem {
    pub at: Tick,
    pub event: SourceEvent,
}

impl SourceItem {
    pub fn record(at: Tick, key: &str, value: i64) -> Self {
        SourceItem {
            at,
            event: SourceEvent::Record {
                key: key.as_bytes().to_vec(),
                value,
            },
        }
    }

    pub fn watermark(at: Tick) -> Self {
        SourceItem {
            at,
            event: SourceEvent::Watermark,
        }
    }

    pub fn marker(at: Tick) -> Self {
        SourceItem {
            at,
            event: SourceEvent::Marker,
        }
    }
}

pub fn key_name(rank: u64) -> Key {
    format!("k{rank}").into_bytes()
}

/// The keyed record stream: `(emission tick, key, value)` at the configured
/// rate with Zipf-distributed key ranks (uniform when `zipf_s` is 0).
pub fn generate_workload(cfg: &WorkloadConfig) -> Result<Vec<(Tick, Key, i64)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf =
        Zipf::new(cfg.key_space as f64, cfg.zipf_s).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..cfg.record_count())
        .map(|i| {
            let rank = (zipf.sample(&mut rng) as u64).clamp(1, cfg.key_space);
            let value = rng.random_range(1..=100);
            (i * 1000 / cfg.rate, key_name(rank), value)
        })
        .collect())
}

/// Splits the record stream round-robin over `sources` instances and adds
/// per-source watermarks and latency markers.
pub fn source_streams(cfg: &WorkloadConfig, sources: usize) -> Result<Vec<Vec<SourceItem>>> {
    let mut out = vec![Vec::new(); sources];
    let mut next_wm = vec![cfg.watermark_interval; sources];
    let mut next_marker = vec![0; sources];
    for (i, (at, key, value)) in generate_workload(cfg)?.into_iter().enumerate() {
        let s = i % sources;
        flush_periodic(cfg, &mut out[s], &mut next_wm[s], &mut next_marker[s], at);
        out[s].push(SourceItem {
            at,
            event: SourceEvent::Record { key, value },
        });
    }
    for s in 0..sources {
        flush_periodic(
            cfg,
            &mut out[s],
            &mut next_wm[s],
            &mut next_marker[s],
            cfg.duration + 1,
        );
    }
    Ok(out)
}

/// Emits markers and watermarks due strictly before `until`.
fn flush_periodic(
    cfg: &WorkloadConfig,
    items: &mut Vec<SourceItem>,
    next_wm: &mut Tick,
    next_marker: &mut Tick,
    until: Tick,
) {
    loop {
        let wm = (cfg.watermark_interval > 0 && *next_wm < until).then_some(*next_wm);
        let mk = (cfg.marker_period > 0 && *next_marker < until).then_some(*next_marker);
        match (wm, mk) {
            (Some(w), m) if m.is_none_or(|m| w <= m) => {
                // A watermark at `w` follows every record emitted at or before `w - 1`.
                items.push(SourceItem::watermark(w));
                *next_wm += cfg.watermark_interval;
            }
            (_, Some(m)) => {
                items.push(SourceItem::marker(m));
                *next_marker += cfg.marker_period;
            }
            _ => break,
        }
    }
}
