//! Runs scenarios and writes their artifacts.
//!
//! Each run lands in `<root>/<scenario>/<policy>-seed<seed>/`:
//!
//! | file              | contents                                   |
//! |-------------------|--------------------------------------------|
//! | `trace.tsv`       | the event trace                            |
//! | `flows.csv`       | `flow_id,class,bytes,fct_ns`               |
//! | `queries.csv`     | `query_id,qct_ns`                          |
//! | `summary.csv`     | `metric,value`                             |
//! | `queue_trace.csv` | sampled free and per-queue occupancy       |
//! | `manifest.json`   | what is needed to replay the run           |

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_scenario, validate_config, PolicySpec, Scenario};
use crate::engine::{run, write_trace, EngineConfig, RunOutput};
use crate::error::HarnessError;
use crate::metrics::{
    queue_trace, summarize, write_flows_csv, write_queries_csv, write_queue_trace_csv, write_summary_csv,
    RunSummary,
};
use crate::{par, scenarios};

pub const OUTPUT_DIR_ENV: &str = "TMSIM_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output root: the explicit flag, else `$TMSIM_OUTPUT_DIR`, else `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

/// Resolves a scenario argument: an existing file path, else a built-in name.
pub fn load_scenario(arg: &str) -> Result<Scenario, HarnessError> {
    let path = Path::new(arg);
    if path.is_file() {
        return Ok(validate_config(path)?);
    }
    match scenarios::builtin(arg) {
        Some(s) => Ok(s?),
        None => Err(HarnessError::Manifest(format!(
            "{arg:?} is neither a file nor a built-in scenario (known: {})",
            scenarios::names().collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub policy: String,
    pub policy_label: String,
    pub seed: u64,
    pub config_sha256: String,
    pub trace_sha256: String,
    pub tool_version: String,
    /// The scenario file as written.
    pub config: String,
    pub config_dir: Option<PathBuf>,
}

/// One run held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub policy: PolicySpec,
    pub seed: u64,
    pub config: EngineConfig,
    pub output: RunOutput,
    pub summary: RunSummary,
    pub config_sha256: String,
    pub trace_sha256: String,
}

/// Runs one (policy, seed) of a scenario without touching the filesystem.
pub fn execute(scenario: &Scenario, policy: &PolicySpec, seed: u64) -> Result<RunResult, HarnessError> {
    let config = scenario.engine_config(policy, seed);
    let output = run(&config, &scenario.workload)?;
    let summary = summarize(output.events.iter().copied(), &config, &output.report)?;
    let mut hasher = HashWriter(Sha256::new());
    write_trace(&output.events, &mut hasher).expect("hashing cannot fail");
    Ok(RunResult {
        policy: *policy,
        seed,
        config_sha256: scenario.config_hash(policy, seed),
        trace_sha256: hex::encode(hasher.0.finalize()),
        config,
        output,
        summary,
    })
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: RunSummary,
}

pub fn run_dir(root: &Path, scenario: &Scenario, policy: &PolicySpec, seed: u64) -> PathBuf {
    root.join(&scenario.name).join(format!("{}-seed{seed}", policy.label()))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Runs and writes one (policy, seed).
pub fn run_one(
    scenario: &Scenario,
    policy: &PolicySpec,
    seed: u64,
    root: &Path,
) -> Result<RunArtifacts, HarnessError> {
    let r = execute(scenario, policy, seed)?;
    let dir = run_dir(root, scenario, policy, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let out = &scenario.outputs;
    let nq = r.config.num_queues();

    for (name, on) in [
        ("trace.tsv", out.trace),
        ("flows.csv", out.flow_csv),
        ("queries.csv", out.flow_csv),
        ("summary.csv", out.summary_csv),
        ("queue_trace.csv", out.queue_trace),
    ] {
        let path = dir.join(name);
        if !on {
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
            continue;
        }
        let mut w = create(&path)?;
        match name {
            "trace.tsv" => write_trace(&r.output.events, &mut w).map_err(io_err(&path))?,
            "flows.csv" => write_flows_csv(&r.summary, &mut w)?,
            "queries.csv" => write_queries_csv(&r.summary, &mut w)?,
            "summary.csv" => write_summary_csv(&r.summary, &r.output.report, &mut w)?,
            _ => {
                let samples = queue_trace(
                    r.output.events.iter().copied(),
                    r.output.report.capacity_cells,
                    nq,
                    out.queue_trace_interval,
                    r.output.report.end_time,
                )?;
                write_queue_trace_csv(&samples, nq, &mut w)?;
            }
        }
        w.flush().map_err(io_err(&path))?;
    }

    let manifest = Manifest {
        scenario: scenario.name.clone(),
        policy: policy.to_string(),
        policy_label: policy.label(),
        seed,
        config_sha256: r.config_sha256,
        trace_sha256: r.trace_sha256,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: scenario.source.clone(),
        config_dir: scenario.base_dir.as_ref().map(|d| fs::canonicalize(d).unwrap_or_else(|_| d.clone())),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| HarnessError::Manifest(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(&path))?;

    Ok(RunArtifacts {
        dir,
        manifest,
        summary: r.summary,
    })
}

/// Runs every policy and seed of the scenario.
pub fn run_scenario(scenario: &Scenario, root: &Path) -> Result<Vec<RunArtifacts>, HarnessError> {
    sweep(scenario, &scenario.policies, &scenario.seeds, root)
}

/// Runs the cross product of `policies` and `seeds`, in parallel when enabled.
///
/// Earlier run directories of this scenario that are not part of the sweep
/// are removed, so the scenario directory holds exactly one directory per run.
pub fn sweep(
    scenario: &Scenario,
    policies: &[PolicySpec],
    seeds: &[u64],
    root: &Path,
) -> Result<Vec<RunArtifacts>, HarnessError> {
    crate::config::check_policies(policies)?;
    crate::config::check_seeds(seeds)?;
    let jobs: Vec<(PolicySpec, u64)> = policies
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (*p, s)))
        .collect();
    remove_stale(root, scenario, &jobs)?;
    par::map_runs(&jobs, |(p, s)| run_one(scenario, p, *s, root))
        .into_iter()
        .collect()
}

fn remove_stale(root: &Path, scenario: &Scenario, jobs: &[(PolicySpec, u64)]) -> Result<(), HarnessError> {
    let base = root.join(&scenario.name);
    let keep: BTreeSet<PathBuf> = jobs.iter().map(|(p, s)| run_dir(root, scenario, p, *s)).collect();
    let entries = match fs::read_dir(&base) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(&base)(e)),
    };
    for entry in entries {
        let path = entry.map_err(io_err(&base))?.path();
        if path.is_dir() && path.join(MANIFEST_FILE).is_file() && !keep.contains(&path) {
            fs::remove_dir_all(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Reads a manifest from a run directory or a manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest, HarnessError> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Manifest(format!("{}: {e}", file.display())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub expected_trace_sha256: String,
    pub actual_trace_sha256: String,
    pub expected_config_sha256: String,
    pub actual_config_sha256: String,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected_trace_sha256 == self.actual_trace_sha256
            && self.expected_config_sha256 == self.actual_config_sha256
    }
}

/// Re-runs the recorded configuration and compares hashes.
pub fn replay(manifest: &Manifest) -> Result<ReplayOutcome, HarnessError> {
    let scenario = parse_scenario(&manifest.config, manifest.config_dir.as_deref())?;
    let policy: PolicySpec = manifest
        .policy
        .parse()
        .map_err(|e: String| HarnessError::Manifest(format!("policy: {e}")))?;
    let r = execute(&scenario, &policy, manifest.seed)?;
    Ok(ReplayOutcome {
        expected_trace_sha256: manifest.trace_sha256.clone(),
        actual_trace_sha256: r.trace_sha256,
        expected_config_sha256: manifest.config_sha256.clone(),
        actual_config_sha256: r.config_sha256,
    })
}
