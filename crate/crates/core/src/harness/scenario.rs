//! Ready-made scenarios used by the CLI, the benches and the test suites.

use std::sync::Arc;

use crate::config::{ScaleSpec, SimConfig};
use crate::graph::JobSpec;
use crate::harness::workload::{SourceItem, WorkloadConfig};
use crate::ids::Tick;
use crate::protocol::ProtocolChoice;
use crate::state::key_to_keygroup;

fn scale(cfg: &mut SimConfig, to: u32, at_tick: Tick) {
    cfg.scale.push(ScaleSpec {
        operator: "agg".into(),
        to,
        at_tick,
        protocol: None,
    });
}

/// generator(2) → aggregator(2→3) → sink under moderate skew, scaled out
/// mid-run. The default scenario for protocol comparisons.
pub fn shared(seed: u64) -> SimConfig {
    let workload = WorkloadConfig {
        rate: 1500,
        duration: 6000,
        key_space: 1000,
        zipf_s: 0.5,
        payload_bytes: 256,
        seed,
        marker_period: 20,
        watermark_interval: 100,
    };
    let mut job = JobSpec::three_operator(64, 2, 2);
    job.channel_capacity = 64;
    job.seed = seed;
    let mut cfg = SimConfig::new("shared", job, workload);
    cfg.runtime.stab_window = 1000;
    scale(&mut cfg, 3, 2000);
    cfg
}

/// Keyed running sums over `records` records, scaled 2→3 halfway.
pub fn keyed_sum(records: u64, zipf_s: f64, num_keygroups: u32, seed: u64) -> SimConfig {
    let rate = 2000;
    let workload = WorkloadConfig {
        rate,
        duration: records * 1000 / rate,
        key_space: 1000,
        zipf_s,
        payload_bytes: 64,
        seed,
        marker_period: 50,
        watermark_interval: 100,
    };
    let mut job = JobSpec::three_operator(num_keygroups, 2, 2);
    job.channel_capacity = 64;
    job.seed = seed;
    let duration = workload.duration;
    let mut cfg = SimConfig::new("keyed_sum", job, workload);
    scale(&mut cfg, 3, duration / 2);
    cfg
}

/// One grid point of a rate × state size × skew sweep.
pub fn sweep_point(rate: u64, payload_bytes: u64, zipf_s: f64, seed: u64) -> SimConfig {
    let mut cfg = shared(seed);
    cfg.name = format!("sweep_r{rate}_b{payload_bytes}_z{zipf_s}");
    cfg.workload.rate = rate;
    cfg.workload.payload_bytes = payload_bytes;
    cfg.workload.zipf_s = zipf_s;
    cfg
}

pub fn sweep_grid(
    rates: &[u64],
    sizes: &[u64],
    zipfs: &[f64],
    protocol: ProtocolChoice,
    seed: u64,
) -> Vec<SimConfig> {
    let mut out = Vec::new();
    for &z in zipfs {
        for &r in rates {
            for &b in sizes {
                out.push(sweep_point(r, b, z, seed).with_protocol(protocol));
            }
        }
    }
    out
}

/// A job of `sources` scripted sources feeding one aggregator.
pub fn scripted(name: &str, num_keygroups: u32, streams: Vec<Vec<SourceItem>>) -> SimConfig {
    let mut job = JobSpec::three_operator(num_keygroups, streams.len() as u32, 1);
    job.channel_capacity = 1000;
    let mut cfg = SimConfig::new(name, job, WorkloadConfig::default());
    cfg.script = Some(Arc::new(streams));
    cfg
}

/// One key per key-group: entry `i` hashes into key-group `i`.
pub fn key_per_keygroup(num_keygroups: u32) -> Vec<String> {
    let mut out = vec![String::new(); num_keygroups as usize];
    let mut filled = 0;
    let mut n = 0u64;
    while filled < num_keygroups as usize {
        let key = format!("k{n}");
        let kg = key_to_keygroup(key.as_bytes(), num_keygroups).index();
        if out[kg].is_empty() {
            out[kg] = key;
            filled += 1;
        }
        n += 1;
    }
    out
}

/// Scale 1→2 over 16 key-groups. Right after the scale request the new
/// instance's backlog starts with a record of the key-group migrated last,
/// followed by records of every other moving key-group.
pub fn head_of_line(protocol: ProtocolChoice) -> SimConfig {
    let k = 16u32;
    let keys = key_per_keygroup(k);
    let scale_at = 100;
    let mut items = Vec::new();
    for round in 0..5 {
        for key in &keys {
            items.push(SourceItem::record(round * 16, key, 1));
        }
    }
    let last = keys.len() - 1;
    items.push(SourceItem::record(scale_at + 1, &keys[last], 1));
    for round in 0..30 {
        for key in &keys[..last] {
            items.push(SourceItem::record(scale_at + 1 + round, key, 1));
        }
    }
    let mut cfg = scripted("head_of_line", k, vec![items]);
    cfg.protocol = protocol;
    cfg.workload.payload_bytes = 512;
    cfg.migration.bandwidth = 512;
    cfg.migration.chunk_base_ticks = 4;
    scale(&mut cfg, 2, scale_at);
    cfg
}

/// Scale 2→3 over 24 key-groups. The middle instance both keeps key-groups
/// 12..16 and receives 8..12; after the request its input alternates between
/// the incoming key-groups, newest-migrated first, and the ones it keeps.
pub fn mixed_backlog(protocol: ProtocolChoice) -> SimConfig {
    let k = 24u32;
    let keys = key_per_keygroup(k);
    let scale_at = 200;
    let mut items = Vec::new();
    for round in 0..4 {
        for key in &keys {
            items.push(SourceItem::record(round * 40, key, 1));
        }
    }
    let mut at = scale_at + 1;
    for round in 1..=10 {
        for (incoming, kept) in keys[8..12].iter().rev().zip(&keys[12..16]) {
            items.push(SourceItem::record(at, incoming, 1));
            items.push(SourceItem::record(at, kept, 1));
            at += 1;
        }
        if round % 5 == 0 {
            items.push(SourceItem::watermark(at));
        }
    }
    let mut job = JobSpec::three_operator(k, 1, 2);
    job.channel_capacity = 1000;
    let mut cfg = SimConfig::new("mixed_backlog", job, WorkloadConfig::default());
    cfg.script = Some(Arc::new(vec![items]));
    cfg.protocol = protocol;
    cfg.workload.payload_bytes = 512;
    cfg.migration.bandwidth = 256;
    cfg.migration.chunk_base_ticks = 4;
    scale(&mut cfg, 3, scale_at);
    cfg
}

/// Scale 1→2 right after the source has pushed `backlog` records into its
/// output cache toward the only aggregator instance.
pub fn prequeued(backlog: usize, protocol: ProtocolChoice) -> SimConfig {
    let k = 16u32;
    let keys = key_per_keygroup(k);
    let items = (0..backlog)
        .map(|n| SourceItem::record(10, &keys[n % keys.len()], 1))
        .collect();
    let mut cfg = scripted("prequeued", k, vec![items]);
    cfg.job.channel_capacity = 8;
    cfg.job.output_cache_capacity = Some(backlog + 64);
    cfg.protocol = protocol;
    scale(&mut cfg, 2, 11);
    cfg
}

/// Scale 1→2 with two sources. One source has a backlog of a hot key of a
/// migrating key-group queued at the old owner; the other keeps sending the
/// same key, which after the switch goes to the new owner.
pub fn alternating_owner(protocol: ProtocolChoice) -> SimConfig {
    let k = 16u32;
    let keys = key_per_keygroup(k);
    let hot = &keys[12];
    let mut steady = Vec::new();
    let mut backlog = Vec::new();
    for (n, key) in keys.iter().enumerate() {
        steady.push(SourceItem::record(0, key, n as i64));
    }
    for _ in 0..120 {
        backlog.push(SourceItem::record(10, hot, 1));
    }
    for t in 12..300 {
        steady.push(SourceItem::record(t, hot, 2));
    }
    let mut cfg = scripted("alternating_owner", k, vec![steady, backlog]);
    cfg.job.channel_capacity = 16;
    cfg.job.output_cache_capacity = Some(512);
    cfg.protocol = protocol;
    scale(&mut cfg, 2, 11);
    cfg
}

/// Where the checkpoint barrier sits when the scale request arrives.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BarrierPosition {
    OutputCache,
    InputBuffer,
}

/// Scale 1→2 one tick after a checkpoint starts, with the barrier still
/// queued ahead of the scaling instance.
pub fn checkpoint_during_scaling(position: BarrierPosition) -> SimConfig {
    let k = 16u32;
    let keys = key_per_keygroup(k);
    let mut items = Vec::new();
    for n in 0..200 {
        items.push(SourceItem::record(5, &keys[n % keys.len()], n as i64));
    }
    for t in 12..200 {
        items.push(SourceItem::record(t, &keys[t as usize % keys.len()], 1));
    }
    let mut cfg = scripted("checkpoint_during_scaling", k, vec![items]);
    match position {
        BarrierPosition::OutputCache => {
            cfg.job.channel_capacity = 16;
            cfg.job.output_cache_capacity = Some(1000);
        }
        BarrierPosition::InputBuffer => {
            cfg.job.channel_capacity = 1000;
        }
    }
    cfg.checkpoints.push(10);
    scale(&mut cfg, 2, 11);
    cfg
}

pub const NAMES: [&str; 8] = [
    "shared",
    "keyed_sum",
    "head_of_line",
    "mixed_backlog",
    "prequeued",
    "alternating_owner",
    "checkpoint_output_cache",
    "checkpoint_input_buffer",
];

/// Looks a scenario up by name. Scripted scenarios ignore `seed`.
pub fn named(name: &str, seed: u64) -> Option<SimConfig> {
    let p = ProtocolChoice::Drrs;
    Some(match name {
        "shared" => shared(seed),
        "keyed_sum" => keyed_sum(100_000, 1.0, 32, seed),
        "head_of_line" => head_of_line(p),
        "mixed_backlog" => mixed_backlog(p),
        "prequeued" => prequeued(1000, p),
        "alternating_owner" => alternating_owner(p),
        "checkpoint_output_cache" => checkpoint_during_scaling(BarrierPosition::OutputCache),
        "checkpoint_input_buffer" => checkpoint_during_scaling(BarrierPosition::InputBuffer),
        _ => return None,
    })
}
