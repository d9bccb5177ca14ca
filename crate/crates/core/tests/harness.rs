use std::fs;
use std::path::Path;

use tmsim_core::config::{validate_config, PolicySpec};
use tmsim_core::harness::{load_manifest, load_scenario, replay, run_scenario, sweep, MANIFEST_FILE};

const SMALL: &str = r#"
name = "small"
duration_us = 100
policies = ["dt:1", "occamy:4"]
seeds = [1, 2]

[switch]
buffer_cells = 256

[[switch.ports]]
rate_gbps = 10
count = 2

[[workload]]
type = "poisson"
queues = ["0.0", "1.0"]
load = 0.9
cdf = "sizes.cdf"

[[workload]]
type = "raw_burst"
queue = "1.0"
start_us = 20
bytes = 30000
"#;

fn write_small(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("sizes.cdf"), "1000 0.5\n20000 1.0\n").unwrap();
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn run_dirs(root: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(root.join("small"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_one_directory_per_policy_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = validate_config(&write_small(tmp.path())).unwrap();
    let out = tmp.path().join("out");
    let runs = run_scenario(&scenario, &out).unwrap();
    assert_eq!(runs.len(), 4);
    assert_eq!(
        run_dirs(&out),
        ["dt-a1-seed1", "dt-a1-seed2", "occamy-a4-seed1", "occamy-a4-seed2"]
    );
    let dir = out.join("small/occamy-a4-seed2");
    for f in ["trace.tsv", "flows.csv", "queries.csv", "summary.csv", "queue_trace.csv", MANIFEST_FILE] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let m = load_manifest(&dir).unwrap();
    assert_eq!(m.seed, 2);
    assert_eq!(m.policy, "occamy:4");
    assert_eq!(m.config, SMALL);
    let flows = fs::read_to_string(dir.join("flows.csv")).unwrap();
    assert!(flows.starts_with("flow_id,class,bytes,fct_ns"));
}

#[test]
fn sweep_replaces_stale_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = validate_config(&write_small(tmp.path())).unwrap();
    let out = tmp.path().join("out");
    run_scenario(&scenario, &out).unwrap();
    fs::create_dir_all(out.join("small/notes")).unwrap();
    let policies: Vec<PolicySpec> = vec!["pushout".parse().unwrap()];
    sweep(&scenario, &policies, &[7], &out).unwrap();
    // directories without a manifest are not ours to delete
    assert_eq!(run_dirs(&out), ["notes", "pushout-seed7"]);
}

#[test]
fn replay_reproduces_trace_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = validate_config(&write_small(tmp.path())).unwrap();
    let out = tmp.path().join("out");
    let runs = run_scenario(&scenario, &out).unwrap();
    for r in &runs {
        let m = load_manifest(&r.dir.join(MANIFEST_FILE)).unwrap();
        let outcome = replay(&m).unwrap();
        assert!(outcome.matches(), "{outcome:?}");
        let trace = fs::read(r.dir.join("trace.tsv")).unwrap();
        use sha2::Digest;
        assert_eq!(hex::encode(sha2::Sha256::digest(&trace)), m.trace_sha256);
    }
    let seeds: Vec<_> = runs.iter().map(|r| &r.manifest.trace_sha256).collect();
    assert_ne!(seeds[0], seeds[1], "seeds should change the Poisson arrivals");
}

#[test]
fn tampered_manifest_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = validate_config(&write_small(tmp.path())).unwrap();
    let runs = run_scenario(&scenario, &tmp.path().join("out")).unwrap();
    let mut m = runs[0].manifest.clone();
    m.config = m.config.replace("bytes = 30000", "bytes = 31000");
    assert!(!replay(&m).unwrap().matches());
}

#[test]
fn builtins_resolve_by_name_and_files_by_path() {
    assert_eq!(load_scenario("fig8-burst").unwrap().name, "fig8-burst");
    let tmp = tempfile::tempdir().unwrap();
    let path = write_small(tmp.path());
    assert_eq!(load_scenario(path.to_str().unwrap()).unwrap().name, "small");
}

#[test]
fn missing_cdf_reports_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, SMALL.replace("sizes.cdf", "absent.cdf")).unwrap();
    let err = validate_config(&path).unwrap_err().to_string();
    assert!(err.contains("workload[0].cdf"), "{err}");
}
