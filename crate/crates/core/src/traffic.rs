//! Workload generators. A [`WorkloadSpec`] is expanded up front, from the run
//! seed, into a list of [`SourcePlan`]s that the engine turns into live sources.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::error::CdfError;
use crate::model::{FlowId, QueueId, SimTime};

/// Flow-size distribution as `(size_bytes, cumulative_probability)` points.
///
/// Sampling is a discrete inverse transform: a uniform draw `u` maps to the
/// smallest size whose cumulative probability is at least `u`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCdf {
    points: Vec<(u64, f64)>,
}

impl EmpiricalCdf {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, CdfError> {
        let Some(&(_, last)) = points.last() else {
            return Err(CdfError::Empty);
        };
        for (i, w) in points.windows(2).enumerate() {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(CdfError::NotIncreasing(i + 1));
            }
        }
        if points[0].0 == 0 || points[0].1.is_nan() || points[0].1 <= 0.0 {
            return Err(CdfError::NotIncreasing(0));
        }
        if (last - 1.0).abs() > 1e-9 {
            return Err(CdfError::BadTail(last));
        }
        Ok(EmpiricalCdf { points })
    }

    /// Parses `size_bytes<TAB>cumulative_probability` lines. Blank lines and
    /// lines starting with `#` are skipped; any whitespace separates columns.
    pub fn parse(text: &str) -> Result<Self, CdfError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| CdfError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut cols = line.split_whitespace();
            let size = cols
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| err("bad size"))?;
            let p = cols
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| err("bad probability"))?;
            if cols.next().is_some() {
                return Err(err("expected two columns"));
            }
            points.push((size, p));
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self, CdfError> {
        let text = std::fs::read_to_string(path).map_err(|e| CdfError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn quantile(&self, u: f64) -> u64 {
        let idx = self.points.partition_point(|&(_, p)| p < u);
        self.points[idx.min(self.points.len() - 1)].0
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        self.points
            .iter()
            .map(|&(s, p)| {
                let m = s as f64 * (p - prev);
                prev = p;
                m
            })
            .sum()
    }

    pub fn to_text(&self) -> String {
        self.points
            .iter()
            .map(|(s, p)| format!("{s}\t{p}\n"))
            .collect()
    }
}

pub fn sample_flow_size<R: Rng + ?Sized>(cdf: &EmpiricalCdf, rng: &mut R) -> u64 {
    cdf.quantile(rng.random::<f64>())
}

/// Heavy-tailed stand-in for a web-search flow-size distribution.
pub const SYNTHETIC_WEB_SEARCH_CDF: &str = include_str!("../data/synthetic_websearch.cdf");

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QueryArrivals {
    Poisson { rate_per_sec: f64 },
    At { times: Vec<SimTime> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Poisson flow arrivals; each flow picks a destination queue uniformly.
    PoissonFlows {
        rate_per_sec: f64,
        cdf: EmpiricalCdf,
        queues: Vec<QueueId>,
        priority_class: u8,
        sender_rate_bps: u64,
        start: SimTime,
        stop: Option<SimTime>,
    },
    /// `fan_in` reliable flows of `query_size / fan_in` bytes, started together.
    IncastQuery {
        fan_in: u32,
        query_size_bytes: u64,
        arrivals: QueryArrivals,
        queue: QueueId,
        priority_class: u8,
        sender_rate_bps: u64,
        stop: Option<SimTime>,
    },
    /// Open-loop paced sources that keep a queue backlogged; `rate_bps` is shared by all flows.
    LongLived {
        flow_count: u32,
        rate_bps: u64,
        packet_bytes: u32,
        queue: QueueId,
        priority_class: u8,
        start: SimTime,
        stop: Option<SimTime>,
    },
    /// One open-loop burst; `rate_bps = None` puts every packet in the same instant.
    RawBurst {
        start: SimTime,
        burst_size_bytes: u64,
        packet_bytes: u32,
        rate_bps: Option<u64>,
        queue: QueueId,
        priority_class: u8,
    },
}

impl GeneratorSpec {
    pub fn queues(&self) -> Vec<QueueId> {
        match self {
            GeneratorSpec::PoissonFlows { queues, .. } => queues.clone(),
            GeneratorSpec::IncastQuery { queue, .. }
            | GeneratorSpec::LongLived { queue, .. }
            | GeneratorSpec::RawBurst { queue, .. } => vec![*queue],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub generators: Vec<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanKind {
    Reliable {
        bytes: u64,
        sender_rate_bps: u64,
    },
    OpenLoop {
        packet_bytes: u32,
        rate_bps: Option<u64>,
        total_bytes: Option<u64>,
        stop: Option<SimTime>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcePlan {
    pub flow_id: FlowId,
    pub generator: usize,
    pub queue: QueueId,
    pub priority_class: u8,
    pub start: SimTime,
    pub query: Option<u64>,
    pub kind: PlanKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub query_id: u64,
    pub generator: usize,
    pub issue_time: SimTime,
    pub flow_ids: Vec<FlowId>,
}

/// Splits one incast query into `fan_in` equal flows (remainder bytes go to
/// the first flows), all starting at `now`.
pub fn issue_incast(
    fan_in: u32,
    query_size_bytes: u64,
    now: SimTime,
    first_flow_id: FlowId,
) -> Vec<(FlowId, u64, SimTime)> {
    assert!(fan_in >= 1, "incast fan-in must be at least 1");
    let m = fan_in as u64;
    let base = query_size_bytes / m;
    let extra = query_size_bytes % m;
    (0..m)
        .map(|i| {
            let bytes = base + u64::from(i < extra);
            (first_flow_id + i, bytes, now)
        })
        .collect()
}

fn generator_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64 + 1);
    rng
}

/// Poisson arrival instants in `[start, end)`.
pub fn poisson_arrivals<R: Rng + ?Sized>(
    rate_per_sec: f64,
    start: SimTime,
    end: SimTime,
    rng: &mut R,
) -> Vec<SimTime> {
    let exp = Exp::new(rate_per_sec).expect("positive Poisson rate");
    let mut t = start.0 as f64;
    let mut out = Vec::new();
    loop {
        t += exp.sample(rng) * 1e9;
        if t >= end.0 as f64 {
            return out;
        }
        out.push(SimTime(t as u64));
    }
}

/// Expands a workload into concrete sources for a run ending at `end`.
pub fn expand_workload(
    workload: &WorkloadSpec,
    end: SimTime,
    seed: u64,
) -> (Vec<SourcePlan>, Vec<QueryPlan>) {
    let mut plans = Vec::new();
    let mut queries = Vec::new();
    let mut next_flow: FlowId = 0;
    let mut next_query = 0u64;
    for (g, spec) in workload.generators.iter().enumerate() {
        let mut rng = generator_rng(seed, g);
        match spec {
            GeneratorSpec::PoissonFlows {
                rate_per_sec,
                cdf,
                queues,
                priority_class,
                sender_rate_bps,
                start,
                stop,
            } => {
                let until = stop.map_or(end, |s| s.min(end));
                for t in poisson_arrivals(*rate_per_sec, *start, until, &mut rng) {
                    let bytes = sample_flow_size(cdf, &mut rng);
                    let queue = queues[rng.random_range(0..queues.len())];
                    plans.push(SourcePlan {
                        flow_id: next_flow,
                        generator: g,
                        queue,
                        priority_class: *priority_class,
                        start: t,
                        query: None,
                        kind: PlanKind::Reliable {
                            bytes,
                            sender_rate_bps: *sender_rate_bps,
                        },
                    });
                    next_flow += 1;
                }
            }
            GeneratorSpec::IncastQuery {
                fan_in,
                query_size_bytes,
                arrivals,
                queue,
                priority_class,
                sender_rate_bps,
                stop,
            } => {
                let until = stop.map_or(end, |s| s.min(end));
                let times = match arrivals {
                    QueryArrivals::Poisson { rate_per_sec } => {
                        poisson_arrivals(*rate_per_sec, SimTime::ZERO, until, &mut rng)
                    }
                    QueryArrivals::At { times } => {
                        times.iter().copied().filter(|&t| t < until).collect()
                    }
                };
                for t in times {
                    let flows = issue_incast(*fan_in, *query_size_bytes, t, next_flow);
                    next_flow += flows.len() as u64;
                    queries.push(QueryPlan {
                        query_id: next_query,
                        generator: g,
                        issue_time: t,
                        flow_ids: flows.iter().map(|f| f.0).collect(),
                    });
                    for (flow_id, bytes, start) in flows {
                        plans.push(SourcePlan {
                            flow_id,
                            generator: g,
                            queue: *queue,
                            priority_class: *priority_class,
                            start,
                            query: Some(next_query),
                            kind: PlanKind::Reliable {
                                bytes,
                                sender_rate_bps: *sender_rate_bps,
                            },
                        });
                    }
                    next_query += 1;
                }
            }
            GeneratorSpec::LongLived {
                flow_count,
                rate_bps,
                packet_bytes,
                queue,
                priority_class,
                start,
                stop,
            } => {
                let n = (*flow_count).max(1) as u64;
                let per_flow = (*rate_bps / n).max(1);
                // stagger the flows evenly across one packet time
                let gap = crate::model::serialization_time(*packet_bytes as u64, per_flow).0 / n;
                for i in 0..n {
                    plans.push(SourcePlan {
                        flow_id: next_flow,
                        generator: g,
                        queue: *queue,
                        priority_class: *priority_class,
                        start: SimTime(start.0 + i * gap),
                        query: None,
                        kind: PlanKind::OpenLoop {
                            packet_bytes: *packet_bytes,
                            rate_bps: Some(per_flow),
                            total_bytes: None,
                            stop: *stop,
                        },
                    });
                    next_flow += 1;
                }
            }
            GeneratorSpec::RawBurst {
                start,
                burst_size_bytes,
                packet_bytes,
                rate_bps,
                queue,
                priority_class,
            } => {
                plans.push(SourcePlan {
                    flow_id: next_flow,
                    generator: g,
                    queue: *queue,
                    priority_class: *priority_class,
                    start: *start,
                    query: None,
                    kind: PlanKind::OpenLoop {
                        packet_bytes: *packet_bytes,
                        rate_bps: *rate_bps,
                        total_bytes: Some(*burst_size_bytes),
                        stop: None,
                    },
                });
                next_flow += 1;
            }
        }
    }
    (plans, queries)
}
