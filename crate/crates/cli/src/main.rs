use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drrs_core::config::{ScaleSpec, SimConfig};
use drrs_core::harness::batch::{metrics_batch, Execution};
use drrs_core::harness::metrics::{compute_metrics, MetricsReport, CSV_HEADER};
use drrs_core::harness::scenario;
use drrs_core::harness::verify::equivalence_check;
use drrs_core::protocol::ProtocolChoice;
use drrs_core::sim::{run, RunResult};

/// Live-rescaling simulator: run scenarios, compare protocols, sweep workloads.
#[derive(Parser)]
#[command(name = "drrs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes metrics.csv and trace.jsonl.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "drrs")]
        protocol: ProtocolChoice,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run one scenario under several protocols; prints one CSV row each.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "drrs,fluid,all_at_once,stop_restart,fetch_on_demand,unbound"
        )]
        protocols: Vec<ProtocolChoice>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Grid over rate × state size × skew on the shared scenario.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1000,1500,2000")]
        rates: Vec<u64>,
        /// State bytes per key.
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1.0,1.5")]
        zipf: Vec<f64>,
        #[arg(long, default_value = "drrs")]
        protocol: ProtocolChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Check scaled runs against the unscaled run; fails if any check fails.
    Verify {
        #[command(flatten)]
        source: Source,
        /// Protocols to check; all authoritative ones when omitted.
        #[arg(long, value_delimiter = ',')]
        protocol: Vec<ProtocolChoice>,
    },
    /// Run a scenario with a custom scale request; also writes session.json.
    Scale {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "agg")]
        operator: String,
        #[arg(long)]
        to: u32,
        #[arg(long, default_value = "drrs")]
        protocol: ProtocolChoice,
        #[arg(long)]
        at_tick: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    /// Built-in scenario name.
    #[arg(long, default_value = "shared")]
    scenario: String,
    /// TOML config file; replaces --scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Source {
    fn load(&self) -> Result<SimConfig> {
        match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(SimConfig::from_toml(&text)?.with_seed(self.seed))
            }
            None => match scenario::named(&self.scenario, self.seed) {
                Some(cfg) => Ok(cfg),
                None => bail!(
                    "unknown scenario `{}`; expected one of {}",
                    self.scenario,
                    scenario::NAMES.join(", ")
                ),
            },
        }
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_run(result: &RunResult, dir: &Path) -> Result<MetricsReport> {
    let report = compute_metrics(result)?;
    MetricsReport::write_csv(
        std::slice::from_ref(&report),
        create(&dir.join("metrics.csv"))?,
    )?;
    result
        .trace
        .write_jsonl(create(&dir.join("trace.jsonl"))?)?;
    Ok(report)
}

fn summarize(report: &MetricsReport, result: &RunResult) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{CSV_HEADER}")?;
    writeln!(out, "{}", report.csv_row())?;
    if !result.authoritative {
        eprintln!("warning: {} runs are not authoritative", report.protocol);
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            source,
            protocol,
            out_dir,
        } => {
            let result = run(&source.load()?.with_protocol(protocol))?;
            let report = write_run(&result, &out_dir)?;
            summarize(&report, &result)?;
        }
        Command::Compare {
            source,
            protocols,
            out,
            sequential,
        } => {
            let base = source.load()?;
            let configs: Vec<SimConfig> =
                protocols.iter().map(|&p| base.with_protocol(p)).collect();
            let reports = metrics_batch(&configs, execution(sequential))?;
            MetricsReport::write_csv(&reports, sink(out.as_deref())?)?;
        }
        Command::Sweep {
            rates,
            sizes,
            zipf,
            protocol,
            seed,
            out,
            sequential,
        } => {
            let configs = scenario::sweep_grid(&rates, &sizes, &zipf, protocol, seed);
            let reports = metrics_batch(&configs, execution(sequential))?;
            let mut w = sink(out.as_deref())?;
            writeln!(w, "rate,state_bytes,zipf_s,{CSV_HEADER}")?;
            for (cfg, report) in configs.iter().zip(&reports) {
                let wl = &cfg.workload;
                writeln!(
                    w,
                    "{},{},{},{}",
                    wl.rate,
                    wl.payload_bytes,
                    wl.zipf_s,
                    report.csv_row()
                )?;
            }
        }
        Command::Verify { source, protocol } => {
            let base = source.load()?;
            let reference = run(&base.without_scaling())?;
            let protocols = if protocol.is_empty() {
                ProtocolChoice::ALL
                    .into_iter()
                    .filter(|p| p.is_authoritative())
                    .collect()
            } else {
                protocol
            };
            let mut ok = true;
            let mut out = io::stdout().lock();
            for p in protocols {
                let verdict = equivalence_check(&run(&base.with_protocol(p))?, &reference);
                writeln!(
                    out,
                    "{p}: state {} order {} exactly-once {}{}",
                    verdict.per_key_state_equal,
                    verdict.per_channel_order_equal,
                    verdict.exactly_once,
                    if p.is_authoritative() {
                        ""
                    } else {
                        " (not authoritative)"
                    },
                )?;
                for diff in verdict.diffs.iter().take(5) {
                    writeln!(out, "  {diff}")?;
                }
                ok &= verdict.passed();
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Scale {
            source,
            operator,
            to,
            protocol,
            at_tick,
            out_dir,
        } => {
            let mut cfg = source.load()?.with_protocol(protocol);
            cfg.scale = vec![ScaleSpec {
                operator,
                to,
                at_tick,
                protocol: None,
            }];
            let result = run(&cfg)?;
            let report = write_run(&result, &out_dir)?;
            serde_json::to_writer_pretty(create(&out_dir.join("session.json"))?, &result.sessions)?;
            summarize(&report, &result)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
