use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tmsim_core::config::{check_policies, check_seeds, PolicySpec, Scenario};
use tmsim_core::harness::{self, RunArtifacts, OUTPUT_DIR_ENV};
use tmsim_core::metrics::percentile;
use tmsim_core::scenarios;

/// Shared-buffer switch traffic manager simulator.
#[derive(Debug, Parser)]
#[command(name = "tmsim", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every policy and seed listed in a scenario.
    Run {
        /// Scenario file, or the name of a built-in scenario.
        scenario: String,
    },
    /// Run a scenario over the given policies and seeds instead of its own.
    Sweep {
        scenario: String,
        /// Comma-separated policies, e.g. `dt:1,occamy:8,pushout,static:100`.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<PolicySpec>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
    /// Check a scenario and print it with defaults applied.
    Validate {
        scenario: String,
        /// Print the normalized scenario as JSON.
        #[arg(long)]
        json: bool,
    },
    /// List the built-in scenarios.
    ListScenarios,
    /// Re-run a recorded run and compare its trace hash.
    Replay {
        /// Run directory or manifest.json.
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let root = harness::output_root(cli.out.as_deref());
    match cli.command {
        Command::Run { scenario } => {
            let s = load(&scenario)?;
            let runs = harness::run_scenario(&s, &root)?;
            report(&s, &runs);
        }
        Command::Sweep {
            scenario,
            policies,
            seeds,
        } => {
            check_policies(&policies)?;
            check_seeds(&seeds)?;
            let s = load(&scenario)?;
            let runs = harness::sweep(&s, &policies, &seeds, &root)?;
            report(&s, &runs);
        }
        Command::Validate { scenario, json } => {
            let s = load(&scenario)?;
            if json {
                println!("{}", serde_json_pretty(&s)?);
            } else {
                describe(&s);
            }
        }
        Command::ListScenarios => {
            let width = scenarios::names().map(str::len).max().unwrap_or(0);
            for name in scenarios::names() {
                let s = scenarios::builtin(name).expect("listed").context(name)?;
                println!("{name:width$}  {}", s.description);
            }
        }
        Command::Replay { run } => {
            let manifest = harness::load_manifest(&run)?;
            let outcome = harness::replay(&manifest)?;
            if outcome.matches() {
                println!("ok: trace {} reproduced", outcome.actual_trace_sha256);
            } else {
                println!(
                    "mismatch:\n  config {} -> {}\n  trace  {} -> {}",
                    outcome.expected_config_sha256,
                    outcome.actual_config_sha256,
                    outcome.expected_trace_sha256,
                    outcome.actual_trace_sha256
                );
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load(arg: &str) -> Result<Scenario> {
    harness::load_scenario(arg).with_context(|| format!("loading scenario {arg}"))
}

fn serde_json_pretty(s: &Scenario) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Normalized<'a> {
        #[serde(flatten)]
        scenario: &'a Scenario,
        slot_ns: u64,
        buffer_bytes: u64,
    }
    let n = Normalized {
        scenario: s,
        slot_ns: s.base.slot().0,
        buffer_bytes: s.base.buffer_cells as u64 * s.base.geometry.cell_size_bytes as u64,
    };
    Ok(serde_json::to_string_pretty(&n)?)
}

fn describe(s: &Scenario) {
    let b = &s.base;
    println!("scenario  {}", s.name);
    if !s.description.is_empty() {
        println!("          {}", s.description);
    }
    println!(
        "buffer    {} cells of {} B ({} B)",
        b.buffer_cells,
        b.geometry.cell_size_bytes,
        b.buffer_cells as u64 * b.geometry.cell_size_bytes as u64
    );
    println!("slot      {} ns, tokens every {} ns, burst cap {}", b.slot().0, b.token_interval().0, b.burst_cap());
    println!("duration  {} us", b.sim_duration.0 / 1000);
    for p in &b.ports {
        let names: Vec<String> = p
            .queue_ids
            .iter()
            .map(|&q| {
                let info = &s.queues[q];
                match info.alpha {
                    Some(a) => format!("{} (alpha {a})", info.name),
                    None => info.name.clone(),
                }
            })
            .collect();
        println!(
            "port {:<4} {} Gbps {:?}: {}",
            p.port_id,
            p.line_rate_bits_per_sec as f64 / 1e9,
            p.scheduler_kind,
            names.join(", ")
        );
    }
    println!("workload  {} generator(s)", s.workload.generators.len());
    let policies: Vec<String> = s.policies.iter().map(|p| p.to_string()).collect();
    println!("policies  {}", policies.join(", "));
    println!("seeds     {:?}", s.seeds);
}

fn report(s: &Scenario, runs: &[RunArtifacts]) {
    println!(
        "{:<16} {:>6} {:>10} {:>10} {:>12} {:>12}  dir",
        "policy", "seed", "tail-drop", "head-drop", "p99 QCT us", "p99 FCT us"
    );
    for r in runs {
        let d = r.summary.total_drops();
        let us = |v: Option<u64>| v.map_or("-".to_string(), |ns| format!("{:.1}", ns as f64 / 1e3));
        println!(
            "{:<16} {:>6} {:>10} {:>10} {:>12} {:>12}  {}",
            r.manifest.policy_label,
            r.manifest.seed,
            d.tail_packets,
            d.head_packets,
            us(percentile(&r.summary.qcts(), 99.0)),
            us(percentile(&r.summary.fcts(), 99.0)),
            r.dir.display()
        );
    }
    if runs.is_empty() {
        println!("{}: nothing to run", s.name);
    }
}
