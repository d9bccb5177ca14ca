//! Scenario files: TOML in, a validated [`Scenario`] out.
//!
//! ```toml
//! name = "example"
//! duration_us = 500
//! policies = ["dt:1", "occamy:8"]
//!
//! [switch]
//! buffer_cells = 1024
//!
//! [[switch.ports]]
//! rate_gbps = 10
//! count = 2
//!
//! [[workload]]
//! type = "long_lived"
//! queue = "0.0"
//! rate_gbps = 20
//! ```
//!
//! Queues are referenced by name, by `"port.index"`, or by global queue id.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admission::{AdmissionPolicy, Alpha, PolicyKind};
use crate::engine::{
    default_buffer_cells, EngineConfig, TokenParams, TransportParams, BUFFER_BYTES_PER_PORT_PER_GBPS,
    DEFAULT_MTU,
};
use crate::error::ConfigError;
use crate::model::{CellGeometry, PortSpec, QueueId, SchedulerKind, SimTime};
use crate::traffic::{EmpiricalCdf, GeneratorSpec, QueryArrivals, WorkloadSpec, SYNTHETIC_WEB_SEARCH_CDF};

/// One entry of a policy sweep, written `kind[:param]`: `dt:1`, `occamy:8`,
/// `pushout`, `static:100` (limit in cells).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub alpha: Option<Alpha>,
    pub static_limit_cells: Option<u32>,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind, alpha: Option<Alpha>) -> Self {
        PolicySpec {
            kind,
            alpha,
            static_limit_cells: None,
        }
    }

    /// Alpha used for queues that do not set their own.
    pub fn effective_alpha(&self) -> Alpha {
        self.alpha.unwrap_or_else(|| self.kind.default_alpha())
    }

    /// Directory-safe name, e.g. `occamy-a8`.
    pub fn label(&self) -> String {
        match self.kind {
            PolicyKind::StaticThreshold => match self.static_limit_cells {
                Some(l) => format!("static-{l}"),
                None => "static".into(),
            },
            PolicyKind::Pushout => "pushout".into(),
            k => format!(
                "{}-a{}",
                k.short_name(),
                self.effective_alpha().to_string().replace('/', "_")
            ),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.short_name())?;
        match (self.kind, self.alpha, self.static_limit_cells) {
            (PolicyKind::StaticThreshold, _, Some(l)) => write!(f, ":{l}"),
            (PolicyKind::Pushout, _, _) => Ok(()),
            (_, Some(a), _) => write!(f, ":{a}"),
            _ => Ok(()),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, param) = match s.trim().split_once(':') {
            Some((n, p)) => (n, Some(p.trim())),
            None => (s.trim(), None),
        };
        let kind: PolicyKind = name.parse()?;
        let mut spec = PolicySpec::new(kind, None);
        match (kind, param) {
            (_, None) => {}
            (PolicyKind::Pushout, Some(_)) => return Err("pushout takes no parameter".into()),
            (PolicyKind::StaticThreshold, Some(p)) => {
                spec.static_limit_cells =
                    Some(p.parse().map_err(|_| format!("bad static limit {p:?}"))?)
            }
            (_, Some(p)) => spec.alpha = Some(p.parse()?),
        }
        Ok(spec)
    }
}

impl Serialize for PolicySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OutputSpec {
    pub trace: bool,
    pub flow_csv: bool,
    pub summary_csv: bool,
    pub queue_trace: bool,
    pub queue_trace_interval: SimTime,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            trace: true,
            flow_csv: true,
            summary_csv: true,
            queue_trace: true,
            queue_trace_interval: SimTime(1_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueInfo {
    pub id: QueueId,
    pub port: usize,
    pub name: String,
    pub alpha: Option<Alpha>,
}

/// A validated scenario. Combine with a policy and seed via
/// [`engine_config`](Scenario::engine_config) to get a runnable config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    /// Everything but the policy and seed.
    pub base: EngineConfig,
    /// Whether Occamy runs may expel.
    pub expulsion: bool,
    pub queues: Vec<QueueInfo>,
    pub workload: WorkloadSpec,
    pub policies: Vec<PolicySpec>,
    pub seeds: Vec<u64>,
    pub outputs: OutputSpec,
    /// The file as written, kept for manifests.
    #[serde(skip)]
    pub source: String,
    /// Directory relative CDF paths were resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn engine_config(&self, policy: &PolicySpec, seed: u64) -> EngineConfig {
        let mut c = self.base.clone();
        let default = policy.effective_alpha();
        c.policy = AdmissionPolicy {
            kind: policy.kind,
            per_queue_alpha: self.queues.iter().map(|q| q.alpha.unwrap_or(default)).collect(),
            static_limit_cells: policy.static_limit_cells,
        };
        c.expulsion_enabled = policy.kind == PolicyKind::Occamy && self.expulsion;
        c.random_seed = seed;
        c
    }

    pub fn queue_by_name(&self, name: &str) -> Option<QueueId> {
        self.queues.iter().find(|q| q.name == name).map(|q| q.id)
    }

    /// SHA-256 over the normalized engine config and workload of one run.
    pub fn config_hash(&self, policy: &PolicySpec, seed: u64) -> String {
        #[derive(Serialize)]
        struct Normalized<'a> {
            config: &'a EngineConfig,
            workload: &'a WorkloadSpec,
        }
        let config = self.engine_config(policy, seed);
        let json = serde_json::to_vec(&Normalized {
            config: &config,
            workload: &self.workload,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: String,
    duration_us: f64,
    seeds: Option<Vec<u64>>,
    policies: Option<Vec<String>>,
    switch: RawSwitch,
    #[serde(default)]
    transport: RawTransport,
    #[serde(default)]
    workload: Vec<RawGenerator>,
    #[serde(default)]
    outputs: RawOutputs,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    cell_bytes: Option<u32>,
    mtu_bytes: Option<u32>,
    buffer_cells: Option<u32>,
    buffer_bytes: Option<u64>,
    buffer_per_port_per_gbps: Option<u64>,
    aggregate_gbps: Option<f64>,
    expulsion: Option<bool>,
    max_head_drops_per_slot: Option<u32>,
    token_interval_ns: Option<u64>,
    token_burst_cap: Option<u64>,
    check_every_slot: Option<bool>,
    ports: Vec<RawPort>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPort {
    rate_gbps: f64,
    scheduler: Option<SchedulerKind>,
    count: Option<u32>,
    queues: Option<RawQueues>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawQueues {
    Count(u32),
    List(Vec<RawQueue>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQueue {
    name: Option<String>,
    alpha: Option<Alpha>,
    rank: Option<u32>,
    quantum_bytes: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransport {
    window_bytes: Option<u64>,
    rto_us: Option<f64>,
    feedback_delay_ns: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutputs {
    trace: Option<bool>,
    flow_csv: Option<bool>,
    summary_csv: Option<bool>,
    queue_trace: Option<bool>,
    queue_trace_interval_ns: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum QueueRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawGenerator {
    Poisson {
        queues: Vec<QueueRef>,
        load: Option<f64>,
        rate_per_sec: Option<f64>,
        cdf: Option<String>,
        sender_gbps: Option<f64>,
        class: Option<u8>,
        start_us: Option<f64>,
        stop_us: Option<f64>,
    },
    Incast {
        queue: QueueRef,
        fan_in: u32,
        query_bytes: u64,
        at_us: Option<Vec<f64>>,
        rate_per_sec: Option<f64>,
        sender_gbps: Option<f64>,
        class: Option<u8>,
        stop_us: Option<f64>,
    },
    LongLived {
        queue: QueueRef,
        rate_gbps: f64,
        flows: Option<u32>,
        packet_bytes: Option<u32>,
        class: Option<u8>,
        start_us: Option<f64>,
        stop_us: Option<f64>,
    },
    RawBurst {
        queue: QueueRef,
        start_us: f64,
        bytes: u64,
        packet_bytes: Option<u32>,
        rate_gbps: Option<f64>,
        class: Option<u8>,
    },
}

const DEFAULT_SENDER_GBPS: f64 = 10.0;
const WEB_SEARCH: &str = "websearch";

fn gbps(path: &str, g: f64) -> Result<u64, ConfigError> {
    if !(g.is_finite() && g > 0.0) {
        return Err(ConfigError::invalid(path, format!("rate must be positive, got {g}")));
    }
    Ok((g * 1e9).round() as u64)
}

fn micros(path: &str, us: f64) -> Result<SimTime, ConfigError> {
    if !(us.is_finite() && us >= 0.0) {
        return Err(ConfigError::invalid(path, format!("time must be non-negative, got {us}")));
    }
    Ok(SimTime((us * 1e3).round() as u64))
}

fn opt_micros(path: &str, us: Option<f64>) -> Result<Option<SimTime>, ConfigError> {
    us.map(|u| micros(path, u)).transpose()
}

/// Reads, parses and validates a scenario file.
pub fn validate_config(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text, path.parent())
}

/// Parses scenario text. Relative CDF paths resolve against `base_dir`.
pub fn parse_scenario(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ConfigError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Builder {
        base_dir: base_dir.map(Path::to_path_buf),
        cdfs: HashMap::new(),
    }
    .build(raw, text)
}

struct Topology<'a> {
    queues: &'a [QueueInfo],
    config: &'a EngineConfig,
}

struct Builder {
    base_dir: Option<PathBuf>,
    cdfs: HashMap<String, EmpiricalCdf>,
}

impl Builder {
    fn build(mut self, raw: RawScenario, source: &str) -> Result<Scenario, ConfigError> {
        if raw.name.trim().is_empty() {
            return Err(ConfigError::invalid("name", "must not be empty"));
        }
        if raw
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(ConfigError::invalid("name", "use letters, digits, '-' and '_' only"));
        }
        let duration = micros("duration_us", raw.duration_us)?;
        if duration == SimTime::ZERO {
            return Err(ConfigError::invalid("duration_us", "must be positive"));
        }

        let sw = &raw.switch;
        let geometry = CellGeometry::new(sw.cell_bytes.unwrap_or(200))
            .map_err(|e| ConfigError::invalid("switch.cell_bytes", e.to_string()))?;
        let mtu = sw.mtu_bytes.unwrap_or(DEFAULT_MTU);
        if mtu == 0 {
            return Err(ConfigError::invalid("switch.mtu_bytes", "must be positive"));
        }
        if sw.ports.is_empty() {
            return Err(ConfigError::invalid("switch.ports", "at least one port is required"));
        }

        let mut ports = Vec::new();
        let mut queues: Vec<QueueInfo> = Vec::new();
        let mut ranks = Vec::new();
        let mut quanta = Vec::new();
        for (i, rp) in sw.ports.iter().enumerate() {
            let path = format!("switch.ports[{i}]");
            let rate = gbps(&format!("{path}.rate_gbps"), rp.rate_gbps)?;
            let count = rp.count.unwrap_or(1);
            if count == 0 {
                return Err(ConfigError::invalid(format!("{path}.count"), "must be at least 1"));
            }
            let list: Vec<RawQueue> = match &rp.queues {
                None => vec![RawQueue::default()],
                Some(RawQueues::Count(0)) => {
                    return Err(ConfigError::invalid(format!("{path}.queues"), "must be at least 1"))
                }
                Some(RawQueues::Count(n)) => (0..*n).map(|_| RawQueue::default()).collect(),
                Some(RawQueues::List(l)) if l.is_empty() => {
                    return Err(ConfigError::invalid(format!("{path}.queues"), "must not be empty"))
                }
                Some(RawQueues::List(l)) => l.clone(),
            };
            if count > 1 && list.iter().any(|q| q.name.is_some()) {
                return Err(ConfigError::invalid(
                    format!("{path}.queues"),
                    "named queues cannot be replicated with count > 1",
                ));
            }
            for _ in 0..count {
                let port_id = ports.len();
                let mut ids = Vec::new();
                for (j, q) in list.iter().enumerate() {
                    let qpath = format!("{path}.queues[{j}]");
                    let id = queues.len();
                    if q.quantum_bytes == Some(0) {
                        return Err(ConfigError::invalid(format!("{qpath}.quantum_bytes"), "must be positive"));
                    }
                    let name = q.name.clone().unwrap_or_else(|| format!("{port_id}.{j}"));
                    if queues.iter().any(|o| o.name == name) {
                        return Err(ConfigError::invalid(format!("{qpath}.name"), format!("duplicate queue name {name:?}")));
                    }
                    ids.push(id);
                    ranks.push(q.rank.unwrap_or(j as u32));
                    quanta.push(q.quantum_bytes.unwrap_or(crate::scheduling::DEFAULT_DRR_QUANTUM));
                    queues.push(QueueInfo {
                        id,
                        port: port_id,
                        name,
                        alpha: q.alpha,
                    });
                }
                ports.push(PortSpec {
                    port_id,
                    line_rate_bits_per_sec: rate,
                    queue_ids: ids,
                    scheduler_kind: rp.scheduler.unwrap_or(SchedulerKind::RoundRobin),
                });
            }
        }

        let buffer_cells = match (sw.buffer_cells, sw.buffer_bytes, sw.buffer_per_port_per_gbps) {
            (Some(_), Some(_), _) => {
                return Err(ConfigError::invalid(
                    "switch.buffer_cells",
                    "give either buffer_cells or buffer_bytes, not both",
                ))
            }
            (Some(_), _, Some(_)) | (_, Some(_), Some(_)) => {
                return Err(ConfigError::invalid(
                    "switch.buffer_per_port_per_gbps",
                    "contradicts the explicit buffer size",
                ))
            }
            (Some(c), None, None) => c,
            (None, Some(b), None) => (b / geometry.cell_size_bytes as u64) as u32,
            (None, None, per) => {
                let per = per.unwrap_or(BUFFER_BYTES_PER_PORT_PER_GBPS);
                let scaled = default_buffer_cells(&ports, geometry) as u64 * per
                    / BUFFER_BYTES_PER_PORT_PER_GBPS;
                scaled as u32
            }
        };
        if buffer_cells == 0 {
            return Err(ConfigError::invalid("switch", "buffer size is zero cells"));
        }

        let n = queues.len();
        let mut base = EngineConfig::new(
            ports,
            buffer_cells,
            AdmissionPolicy::uniform(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), n),
            duration,
        );
        base.geometry = geometry;
        base.mtu_bytes = mtu;
        base.queue_ranks = ranks;
        base.queue_quanta = quanta;
        base.aggregate_bps = sw
            .aggregate_gbps
            .map(|g| gbps("switch.aggregate_gbps", g))
            .transpose()?;
        base.max_head_drops_per_slot = sw.max_head_drops_per_slot.unwrap_or(1);
        base.tokens = TokenParams {
            interval: sw.token_interval_ns.map(SimTime),
            burst_cap: sw.token_burst_cap,
        };
        base.check_every_slot = sw.check_every_slot.unwrap_or(false);
        base.transport = TransportParams {
            window_bytes: raw.transport.window_bytes.unwrap_or(TransportParams::default().window_bytes),
            rto: match raw.transport.rto_us {
                Some(us) => micros("transport.rto_us", us)?,
                None => TransportParams::default().rto,
            },
            feedback_delay: SimTime(raw.transport.feedback_delay_ns.unwrap_or(0)),
        };
        if base.transport.window_bytes == 0 {
            return Err(ConfigError::invalid("transport.window_bytes", "must be positive"));
        }
        base.validate()
            .map_err(|e| ConfigError::invalid("switch", e.to_string()))?;

        let topo = Topology {
            queues: &queues,
            config: &base,
        };
        let mut generators = Vec::new();
        for (i, g) in raw.workload.iter().enumerate() {
            generators.push(self.generator(&format!("workload[{i}]"), g, &topo)?);
        }
        let workload = WorkloadSpec { generators };
        base.validate_workload(&workload)
            .map_err(|e| ConfigError::invalid("workload", e.to_string()))?;

        let policies = match &raw.policies {
            None => vec![
                PolicySpec::new(PolicyKind::DynamicThreshold, None),
                PolicySpec::new(PolicyKind::Occamy, None),
            ],
            Some(list) => {
                let mut out = Vec::new();
                for (i, p) in list.iter().enumerate() {
                    let spec: PolicySpec = p
                        .parse()
                        .map_err(|e: String| ConfigError::invalid(format!("policies[{i}]"), e))?;
                    out.push(spec);
                }
                out
            }
        };
        check_policies(&policies)?;
        let seeds = raw.seeds.clone().unwrap_or_else(|| vec![1]);
        check_seeds(&seeds)?;

        let o = &raw.outputs;
        let d = OutputSpec::default();
        let outputs = OutputSpec {
            trace: o.trace.unwrap_or(d.trace),
            flow_csv: o.flow_csv.unwrap_or(d.flow_csv),
            summary_csv: o.summary_csv.unwrap_or(d.summary_csv),
            queue_trace: o.queue_trace.unwrap_or(d.queue_trace),
            queue_trace_interval: o
                .queue_trace_interval_ns
                .map(SimTime)
                .unwrap_or(d.queue_trace_interval),
        };
        if outputs.queue_trace_interval == SimTime::ZERO {
            return Err(ConfigError::invalid("outputs.queue_trace_interval_ns", "must be positive"));
        }

        Ok(Scenario {
            name: raw.name.clone(),
            description: raw.description.clone(),
            base,
            expulsion: sw.expulsion.unwrap_or(true),
            queues,
            workload,
            policies,
            seeds,
            outputs,
            source: source.to_string(),
            base_dir: self.base_dir.clone(),
        })
    }

    fn resolve(&self, path: &str, r: &QueueRef, sc: &Topology) -> Result<QueueId, ConfigError> {
        match r {
            QueueRef::Id(id) if *id < sc.queues.len() => Ok(*id),
            QueueRef::Id(id) => Err(ConfigError::invalid(path, format!("no queue with id {id}"))),
            QueueRef::Name(name) => sc
                .queues
                .iter()
                .find(|q| &q.name == name)
                .map(|q| q.id)
                .ok_or_else(|| ConfigError::invalid(path, format!("no queue named {name:?}"))),
        }
    }

    fn cdf(&mut self, path: &str, name: Option<&str>) -> Result<EmpiricalCdf, ConfigError> {
        let name = name.unwrap_or(WEB_SEARCH);
        if let Some(c) = self.cdfs.get(name) {
            return Ok(c.clone());
        }
        let cdf = if name == WEB_SEARCH {
            EmpiricalCdf::parse(SYNTHETIC_WEB_SEARCH_CDF).expect("shipped CDF is valid")
        } else {
            let mut p = PathBuf::from(name);
            if p.is_relative() {
                if let Some(dir) = &self.base_dir {
                    p = dir.join(p);
                }
            }
            EmpiricalCdf::load(&p).map_err(|source| ConfigError::Cdf {
                path: format!("{path}.cdf ({})", p.display()),
                source,
            })?
        };
        self.cdfs.insert(name.to_string(), cdf.clone());
        Ok(cdf)
    }

    fn generator(&mut self, path: &str, g: &RawGenerator, sc: &Topology) -> Result<GeneratorSpec, ConfigError> {
        let sender = |s: Option<f64>| gbps(&format!("{path}.sender_gbps"), s.unwrap_or(DEFAULT_SENDER_GBPS));
        Ok(match g {
            RawGenerator::Poisson {
                queues,
                load,
                rate_per_sec,
                cdf,
                sender_gbps,
                class,
                start_us,
                stop_us,
            } => {
                if queues.is_empty() {
                    return Err(ConfigError::invalid(format!("{path}.queues"), "must not be empty"));
                }
                let ids = queues
                    .iter()
                    .enumerate()
                    .map(|(i, r)| self.resolve(&format!("{path}.queues[{i}]"), r, sc))
                    .collect::<Result<Vec<_>, _>>()?;
                let cdf = self.cdf(path, cdf.as_deref())?;
                let rate = match (load, rate_per_sec) {
                    (Some(_), Some(_)) => {
                        return Err(ConfigError::invalid(path, "give either load or rate_per_sec"))
                    }
                    (None, None) => {
                        return Err(ConfigError::invalid(path, "one of load or rate_per_sec is required"))
                    }
                    (None, Some(r)) => *r,
                    (Some(l), None) => {
                        if !(l.is_finite() && *l > 0.0) {
                            return Err(ConfigError::invalid(format!("{path}.load"), "must be positive"));
                        }
                        let ports: BTreeSet<usize> = ids.iter().map(|&q| sc.queues[q].port).collect();
                        let capacity: f64 = ports
                            .iter()
                            .map(|&p| sc.config.ports[p].line_rate_bits_per_sec as f64)
                            .sum();
                        l * capacity / (8.0 * cdf.mean())
                    }
                };
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(ConfigError::invalid(format!("{path}.rate_per_sec"), "must be positive"));
                }
                GeneratorSpec::PoissonFlows {
                    rate_per_sec: rate,
                    cdf,
                    queues: ids,
                    priority_class: class.unwrap_or(0),
                    sender_rate_bps: sender(*sender_gbps)?,
                    start: micros(&format!("{path}.start_us"), start_us.unwrap_or(0.0))?,
                    stop: opt_micros(&format!("{path}.stop_us"), *stop_us)?,
                }
            }
            RawGenerator::Incast {
                queue,
                fan_in,
                query_bytes,
                at_us,
                rate_per_sec,
                sender_gbps,
                class,
                stop_us,
            } => {
                if *fan_in == 0 {
                    return Err(ConfigError::invalid(format!("{path}.fan_in"), "must be at least 1"));
                }
                if *query_bytes < *fan_in as u64 {
                    return Err(ConfigError::invalid(
                        format!("{path}.query_bytes"),
                        "must be at least one byte per flow",
                    ));
                }
                let arrivals = match (at_us, rate_per_sec) {
                    (Some(times), None) => QueryArrivals::At {
                        times: times
                            .iter()
                            .map(|&t| micros(&format!("{path}.at_us"), t))
                            .collect::<Result<_, _>>()?,
                    },
                    (None, Some(r)) if r.is_finite() && *r > 0.0 => {
                        QueryArrivals::Poisson { rate_per_sec: *r }
                    }
                    (None, Some(_)) => {
                        return Err(ConfigError::invalid(format!("{path}.rate_per_sec"), "must be positive"))
                    }
                    _ => return Err(ConfigError::invalid(path, "give exactly one of at_us or rate_per_sec")),
                };
                GeneratorSpec::IncastQuery {
                    fan_in: *fan_in,
                    query_size_bytes: *query_bytes,
                    arrivals,
                    queue: self.resolve(&format!("{path}.queue"), queue, sc)?,
                    priority_class: class.unwrap_or(0),
                    sender_rate_bps: sender(*sender_gbps)?,
                    stop: opt_micros(&format!("{path}.stop_us"), *stop_us)?,
                }
            }
            RawGenerator::LongLived {
                queue,
                rate_gbps,
                flows,
                packet_bytes,
                class,
                start_us,
                stop_us,
            } => GeneratorSpec::LongLived {
                flow_count: match flows.unwrap_or(1) {
                    0 => return Err(ConfigError::invalid(format!("{path}.flows"), "must be at least 1")),
                    f => f,
                },
                rate_bps: gbps(&format!("{path}.rate_gbps"), *rate_gbps)?,
                packet_bytes: self.packet(path, *packet_bytes, sc)?,
                queue: self.resolve(&format!("{path}.queue"), queue, sc)?,
                priority_class: class.unwrap_or(0),
                start: micros(&format!("{path}.start_us"), start_us.unwrap_or(0.0))?,
                stop: opt_micros(&format!("{path}.stop_us"), *stop_us)?,
            },
            RawGenerator::RawBurst {
                queue,
                start_us,
                bytes,
                packet_bytes,
                rate_gbps,
                class,
            } => GeneratorSpec::RawBurst {
                start: micros(&format!("{path}.start_us"), *start_us)?,
                burst_size_bytes: *bytes,
                packet_bytes: self.packet(path, *packet_bytes, sc)?,
                rate_bps: rate_gbps
                    .map(|g| gbps(&format!("{path}.rate_gbps"), g))
                    .transpose()?,
                queue: self.resolve(&format!("{path}.queue"), queue, sc)?,
                priority_class: class.unwrap_or(0),
            },
        })
    }

    fn packet(&self, path: &str, bytes: Option<u32>, sc: &Topology) -> Result<u32, ConfigError> {
        let mtu = sc.config.mtu_bytes;
        match bytes.unwrap_or(mtu) {
            b if b == 0 || b > mtu => Err(ConfigError::invalid(
                format!("{path}.packet_bytes"),
                format!("must be within 1..={mtu}"),
            )),
            b => Ok(b),
        }
    }
}

pub fn check_policies(policies: &[PolicySpec]) -> Result<(), ConfigError> {
    if policies.is_empty() {
        return Err(ConfigError::invalid("policies", "must not be empty"));
    }
    let mut labels = BTreeSet::new();
    for p in policies {
        if !labels.insert(p.label()) {
            return Err(ConfigError::invalid("policies", format!("duplicate policy {p}")));
        }
    }
    Ok(())
}

pub fn check_seeds(seeds: &[u64]) -> Result<(), ConfigError> {
    if seeds.is_empty() {
        return Err(ConfigError::invalid("seeds", "must not be empty"));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(ConfigError::invalid("seeds", "duplicate seed"));
    }
    Ok(())
}
