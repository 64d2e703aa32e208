//! Runs independent simulations side by side.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::SimConfig;
use crate::error::Result;
use crate::harness::metrics::{compute_metrics, MetricsReport};
use crate::sim::{run, RunResult};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Parallel when the crate was built with rayon, sequential otherwise.
    pub fn available(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

fn map<T: Send, F>(configs: &[SimConfig], exec: Execution, f: F) -> Vec<T>
where
    F: Fn(&SimConfig) -> T + Sync + Send,
{
    match exec.available() {
        Execution::Sequential => configs.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => configs.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => unreachable!("parallel execution needs the `parallel` feature"),
    }
}

/// Runs every config; results keep the input order.
pub fn run_batch(configs: &[SimConfig], exec: Execution) -> Vec<Result<RunResult>> {
    map(configs, exec, run)
}

/// Runs every config and reduces each run to its metrics.
pub fn metrics_batch(configs: &[SimConfig], exec: Execution) -> Result<Vec<MetricsReport>> {
    map(configs, exec, |c| run(c).and_then(|r| compute_metrics(&r)))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::JobSpec;
    use crate::harness::workload::WorkloadConfig;

    fn configs() -> Vec<SimConfig> {
        let workload = WorkloadConfig {
            rate: 300,
            duration: 600,
            key_space: 40,
            ..WorkloadConfig::default()
        };
        (0..4)
            .map(|seed| {
                SimConfig::new("batch", JobSpec::three_operator(8, 1, 2), workload.clone())
                    .with_seed(seed)
            })
            .collect()
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfgs = configs();
        let seq = metrics_batch(&cfgs, Execution::Sequential).unwrap();
        let par = metrics_batch(&cfgs, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(
            seq.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }
}
