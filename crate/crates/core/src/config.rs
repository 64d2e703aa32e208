//! Scenario configuration: the job, its workload, runtime costs, protocol
//! options and scheduled scale requests.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JobSpec;
use crate::harness::workload::{SourceItem, WorkloadConfig};
use crate::ids::Tick;
use crate::protocol::{ProtocolChoice, SchedulingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Ticks an operator spends on one data record.
    pub record_cost: Tick,
    /// Latency must stay under `stab_threshold` times the pre-scaling
    /// average for this long before scaling counts as finished.
    pub stab_window: Tick,
    pub stab_threshold: f64,
    pub throughput_bucket: Tick,
    /// Hard stop for runaway runs.
    pub max_ticks: Tick,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            record_cost: 1,
            stab_window: 2000,
            stab_threshold: 1.10,
            throughput_bucket: 100,
            max_ticks: 10_000_000,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Division {
    /// Near-equal subscales of at most `max_subscale_size` key-groups.
    Subscales,
    /// One subscale per (source, target) pair.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationConfig {
    /// Fixed cost of shipping one state chunk.
    pub chunk_base_ticks: Tick,
    /// Migration path bandwidth in state bytes per tick.
    pub bandwidth: u64,
    /// Ticks the source spends handling a trigger barrier.
    pub trigger_ticks: Tick,
    /// Downtime between drain and resume for stop-and-restart.
    pub restart_ticks: Tick,
    pub max_subscale_size: usize,
    pub division: Division,
    /// In-flight subscale operations allowed per instance.
    pub concurrency_cap: usize,
    pub reroute_capacity: usize,
    pub reroute_timeout: Tick,
    /// Sub-key-groups per key-group for fetch-on-demand.
    pub fetch_fanout: u32,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        MigrationConfig {
            chunk_base_ticks: 2,
            bandwidth: 4096,
            trigger_ticks: 1,
            restart_ticks: 500,
            max_subscale_size: 4,
            division: Division::Subscales,
            concurrency_cap: 2,
            reroute_capacity: 32,
            reroute_timeout: 5,
            fetch_fanout: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub operator: String,
    pub to: u32,
    pub at_tick: Tick,
    /// Overrides the scenario protocol for this request.
    #[serde(default)]
    pub protocol: Option<ProtocolChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub job: JobSpec,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub migration: MigrationConfig,
    #[serde(default = "default_protocol")]
    pub protocol: ProtocolChoice,
    /// Record scheduling options; `None` uses the protocol's default.
    #[serde(default)]
    pub scheduling: Option<SchedulingConfig>,
    #[serde(default)]
    pub scale: Vec<ScaleSpec>,
    /// Ticks at which checkpoints are started.
    #[serde(default)]
    pub checkpoints: Vec<Tick>,
    /// Hand-built per-source streams replacing the generated workload.
    #[serde(skip)]
    pub script: Option<Arc<Vec<Vec<SourceItem>>>>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_protocol() -> ProtocolChoice {
    ProtocolChoice::Drrs
}

impl SimConfig {
    pub fn new(name: &str, job: JobSpec, workload: WorkloadConfig) -> Self {
        SimConfig {
            name: name.into(),
            job,
            workload,
            runtime: RuntimeConfig::default(),
            migration: MigrationConfig::default(),
            protocol: ProtocolChoice::Drrs,
            scheduling: None,
            scale: Vec::new(),
            checkpoints: Vec::new(),
            script: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scheduling_for(&self, protocol: ProtocolChoice) -> SchedulingConfig {
        match &self.scheduling {
            Some(s) => s.clone(),
            None if protocol.schedules_by_default() => SchedulingConfig::default(),
            None => SchedulingConfig::disabled(),
        }
    }

    /// Same scenario under another protocol.
    pub fn with_protocol(&self, protocol: ProtocolChoice) -> Self {
        SimConfig {
            protocol,
            ..self.clone()
        }
    }

    /// Same scenario with scaling requests and checkpoints removed.
    pub fn without_scaling(&self) -> Self {
        SimConfig {
            scale: Vec::new(),
            checkpoints: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.workload.seed = seed;
        c.job.seed = seed;
        c
    }
}
