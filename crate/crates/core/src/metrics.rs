//! Measurements derived from event streams.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::engine::{run_with_sink, EngineConfig, EventKind, EventRecord, FnSink, RunReport};
use crate::error::MetricsError;
use crate::model::{FlowId, QueueId, SimTime};
use crate::traffic::{expand_workload, GeneratorSpec, WorkloadSpec};

/// Window over which memory-bandwidth utilization is measured at each drop.
pub const BANDWIDTH_WINDOW: SimTime = SimTime(1_000);

/// Buffer state rebuilt from events alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    capacity: u32,
    free: u32,
    occupancy: Vec<u32>,
}

impl Replay {
    pub fn new(capacity_cells: u32, num_queues: usize) -> Self {
        Replay {
            capacity: capacity_cells,
            free: capacity_cells,
            occupancy: vec![0; num_queues],
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn free(&self) -> u32 {
        self.free
    }

    pub fn occupancy(&self, q: QueueId) -> u32 {
        self.occupancy[q]
    }

    pub fn occupancies(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn apply(&mut self, ev: &EventRecord) -> Result<(), MetricsError> {
        let queues = self.occupancy.len();
        let occ = self
            .occupancy
            .get_mut(ev.queue_id)
            .ok_or(MetricsError::UnknownQueue {
                queue: ev.queue_id,
                queues,
            })?;
        let corrupt = || MetricsError::ReplayUnderflow { time_ns: ev.time.0 };
        match ev.kind {
            EventKind::Admit => {
                *occ += ev.length_cells;
                self.free = self.free.checked_sub(ev.length_cells).ok_or_else(corrupt)?;
            }
            EventKind::DequeueStart | EventKind::HeadDrop | EventKind::PushoutExpel => {
                *occ = occ.checked_sub(ev.length_cells).ok_or_else(corrupt)?;
                self.free += ev.length_cells;
            }
            EventKind::Arrival | EventKind::TailDrop | EventKind::DequeueComplete => {}
        }
        Ok(())
    }
}

/// Integral of a piecewise-constant signal.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeAverage {
    start: Option<SimTime>,
    last: SimTime,
    value: f64,
    area: f64,
}

impl TimeAverage {
    /// The signal takes `value` from `t` on.
    pub fn set(&mut self, t: SimTime, value: f64) {
        match self.start {
            None => self.start = Some(t),
            Some(_) => self.area += self.value * t.saturating_sub(self.last).0 as f64,
        }
        self.last = t;
        self.value = value;
    }

    pub fn mean_until(&self, end: SimTime) -> Option<f64> {
        let start = self.start?;
        let area = self.area + self.value * end.saturating_sub(self.last).0 as f64;
        let span = end.saturating_sub(start).0;
        (span > 0).then(|| area / span as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounts {
    pub tail_packets: u64,
    pub tail_cells: u64,
    /// Head drops include Pushout expulsions.
    pub head_packets: u64,
    pub head_cells: u64,
}

impl DropCounts {
    fn add(&mut self, kind: EventKind, cells: u32) {
        match kind {
            EventKind::TailDrop => {
                self.tail_packets += 1;
                self.tail_cells += cells as u64;
            }
            EventKind::HeadDrop | EventKind::PushoutExpel => {
                self.head_packets += 1;
                self.head_cells += cells as u64;
            }
            _ => {}
        }
    }

    pub fn total_packets(&self) -> u64 {
        self.tail_packets + self.head_packets
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CellCounts {
    pub admitted: u64,
    pub transmitted: u64,
    pub head_dropped: u64,
    pub residual: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowMetric {
    pub flow_id: FlowId,
    pub class: u8,
    pub bytes: u64,
    pub fct_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetric {
    pub query_id: u64,
    pub qct_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub flows: Vec<FlowMetric>,
    pub queries: Vec<QueryMetric>,
    pub drops_by_queue: Vec<DropCounts>,
    pub drops_by_class: BTreeMap<u8, DropCounts>,
    pub cells_by_queue: Vec<CellCounts>,
    pub max_queue_cells: Vec<u32>,
    pub mean_queue_cells: Vec<f64>,
    pub mean_free_cells: f64,
    pub buffer_utilization_at_drop: Vec<f64>,
    pub bandwidth_utilization_at_drop: Vec<f64>,
    /// Head-dropped cells per second of simulated time.
    pub expulsion_rate_cells_per_sec: f64,
    pub duration: SimTime,
}

impl RunSummary {
    pub fn total_drops(&self) -> DropCounts {
        self.drops_by_queue.iter().fold(DropCounts::default(), |mut acc, d| {
            acc.tail_packets += d.tail_packets;
            acc.tail_cells += d.tail_cells;
            acc.head_packets += d.head_packets;
            acc.head_cells += d.head_cells;
            acc
        })
    }

    pub fn qcts(&self) -> Vec<u64> {
        self.queries.iter().filter_map(|q| q.qct_ns).collect()
    }

    pub fn fcts(&self) -> Vec<u64> {
        self.flows.iter().filter_map(|f| f.fct_ns).collect()
    }
}

/// Folds a complete, time-ordered event stream into a summary.
pub fn summarize<I>(events: I, config: &EngineConfig, report: &RunReport) -> Result<RunSummary, MetricsError>
where
    I: IntoIterator<Item = EventRecord>,
{
    let nq = config.num_queues();
    let capacity = config.buffer_cells;
    let class_of: Vec<u8> = report.flows.iter().map(|f| f.priority_class).collect();
    let window_cells = BANDWIDTH_WINDOW.0 as f64 / config.slot().0 as f64;

    let mut replay = Replay::new(capacity, nq);
    let mut drops_by_queue = vec![DropCounts::default(); nq];
    let mut drops_by_class: BTreeMap<u8, DropCounts> = BTreeMap::new();
    let mut cells = vec![CellCounts::default(); nq];
    let mut max_q = vec![0u32; nq];
    let mut avg_q = vec![TimeAverage::default(); nq];
    let mut avg_free = TimeAverage::default();
    avg_free.set(SimTime::ZERO, capacity as f64);
    for a in &mut avg_q {
        a.set(SimTime::ZERO, 0.0);
    }
    let mut buf_util = Vec::new();
    let mut bw_util = Vec::new();
    let mut recent_tx: VecDeque<(SimTime, u32)> = VecDeque::new();
    let mut recent_sum: u64 = 0;
    let mut last = SimTime::ZERO;

    for (index, ev) in events.into_iter().enumerate() {
        if ev.time < last {
            return Err(MetricsError::OutOfOrder { index });
        }
        last = ev.time;
        if ev.kind.is_drop() {
            buf_util.push((capacity - replay.free()) as f64 / capacity as f64);
            while recent_tx
                .front()
                .is_some_and(|&(t, _)| t.0 + BANDWIDTH_WINDOW.0 <= ev.time.0)
            {
                recent_sum -= recent_tx.pop_front().unwrap().1 as u64;
            }
            bw_util.push((recent_sum as f64 / window_cells).min(1.0));
            drops_by_queue
                .get_mut(ev.queue_id)
                .ok_or(MetricsError::UnknownQueue {
                    queue: ev.queue_id,
                    queues: nq,
                })?
                .add(ev.kind, ev.length_cells);
            let class = class_of.get(ev.flow_id as usize).copied().unwrap_or(0);
            drops_by_class.entry(class).or_default().add(ev.kind, ev.length_cells);
        }
        replay.apply(&ev)?;
        let c = &mut cells[ev.queue_id];
        match ev.kind {
            EventKind::Admit => c.admitted += ev.length_cells as u64,
            EventKind::DequeueStart => {
                c.transmitted += ev.length_cells as u64;
                recent_tx.push_back((ev.time, ev.length_cells));
                recent_sum += ev.length_cells as u64;
            }
            EventKind::HeadDrop | EventKind::PushoutExpel => {
                c.head_dropped += ev.length_cells as u64
            }
            _ => {}
        }
        if matches!(
            ev.kind,
            EventKind::Admit | EventKind::DequeueStart | EventKind::HeadDrop | EventKind::PushoutExpel
        ) {
            let occ = replay.occupancy(ev.queue_id);
            max_q[ev.queue_id] = max_q[ev.queue_id].max(occ);
            avg_q[ev.queue_id].set(ev.time, occ as f64);
            avg_free.set(ev.time, replay.free() as f64);
        }
    }

    let end = report.end_time.max(last);
    for (q, c) in cells.iter_mut().enumerate() {
        c.residual = replay.occupancy(q) as u64;
    }
    let head_cells: u64 = cells.iter().map(|c| c.head_dropped).sum();
    let secs = end.0 as f64 / 1e9;
    Ok(RunSummary {
        flows: report
            .flows
            .iter()
            .filter(|f| f.reliable)
            .map(|f| FlowMetric {
                flow_id: f.flow_id,
                class: f.priority_class,
                bytes: f.bytes,
                fct_ns: f.fct().map(|t| t.0),
            })
            .collect(),
        queries: report
            .queries
            .iter()
            .map(|q| QueryMetric {
                query_id: q.query_id,
                qct_ns: q.qct().map(|t| t.0),
            })
            .collect(),
        drops_by_queue,
        drops_by_class,
        cells_by_queue: cells,
        max_queue_cells: max_q,
        mean_queue_cells: avg_q.iter().map(|a| a.mean_until(end).unwrap_or(0.0)).collect(),
        mean_free_cells: avg_free.mean_until(end).unwrap_or(capacity as f64),
        buffer_utilization_at_drop: buf_util,
        bandwidth_utilization_at_drop: bw_util,
        expulsion_rate_cells_per_sec: if secs > 0.0 { head_cells as f64 / secs } else { 0.0 },
        duration: end,
    })
}

/// Admitted cells equal transmitted + head-dropped + resident, per queue and in
/// total, and the replayed residue matches the engine's final state.
pub fn counting_identity_holds(summary: &RunSummary, report: &RunReport) -> bool {
    let per_queue = summary
        .cells_by_queue
        .iter()
        .zip(&report.final_occupancy_cells)
        .all(|(c, &occ)| {
            c.admitted == c.transmitted + c.head_dropped + c.residual && c.residual == occ as u64
        });
    let stats_agree = summary
        .cells_by_queue
        .iter()
        .zip(&report.queue_stats)
        .all(|(c, s)| {
            c.admitted == s.enqueued_cells
                && c.transmitted == s.dequeued_cells
                && c.head_dropped == s.head_dropped_cells
        });
    per_queue && stats_agree
}

/// Expelled cells never exceed the tokens the bucket generated.
pub fn expulsion_within_budget(summary: &RunSummary, report: &RunReport) -> bool {
    let expelled = summary.expulsion_rate_cells_per_sec * summary.duration.0 as f64 / 1e9;
    expelled <= report.tokens_generated as f64 + 1e-6
}

/// Nearest-rank percentile, `p` in (0, 100].
pub fn percentile<T: PartialOrd + Copy>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("percentile of NaN"));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

pub fn slowdown(actual: SimTime, ideal: SimTime) -> Result<f64, MetricsError> {
    if ideal == SimTime::ZERO {
        return Err(MetricsError::ZeroIdeal);
    }
    Ok(actual.0 as f64 / ideal.0 as f64)
}

/// Occupancy of every queue sampled every `interval`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueSample {
    pub time: SimTime,
    pub free_cells: u32,
    pub occupancy_cells: Vec<u32>,
}

pub fn queue_trace<I>(
    events: I,
    capacity_cells: u32,
    num_queues: usize,
    interval: SimTime,
    end: SimTime,
) -> Result<Vec<QueueSample>, MetricsError>
where
    I: IntoIterator<Item = EventRecord>,
{
    assert!(interval.0 > 0);
    let mut replay = Replay::new(capacity_cells, num_queues);
    let mut out = Vec::new();
    let mut next = SimTime::ZERO;
    let mut sample = |replay: &Replay, upto: SimTime, next: &mut SimTime| {
        while *next < upto {
            out.push(QueueSample {
                time: *next,
                free_cells: replay.free(),
                occupancy_cells: replay.occupancies().to_vec(),
            });
            *next = *next + interval;
        }
    };
    for ev in events {
        sample(&replay, ev.time, &mut next);
        replay.apply(&ev)?;
    }
    sample(&replay, SimTime(end.0 + 1), &mut next);
    Ok(out)
}

pub fn write_flows_csv<W: Write>(summary: &RunSummary, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["flow_id", "class", "bytes", "fct_ns"])?;
    for f in &summary.flows {
        out.write_record([
            f.flow_id.to_string(),
            f.class.to_string(),
            f.bytes.to_string(),
            f.fct_ns.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_queries_csv<W: Write>(summary: &RunSummary, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["query_id", "qct_ns"])?;
    for q in &summary.queries {
        out.write_record([
            q.query_id.to_string(),
            q.qct_ns.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_queue_trace_csv<W: Write>(samples: &[QueueSample], num_queues: usize, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["time_ns".to_string(), "free_cells".to_string()];
    header.extend((0..num_queues).map(|q| format!("q{q}")));
    out.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.time.0.to_string(), s.free_cells.to_string()];
        row.extend(s.occupancy_cells.iter().map(u32::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Scalar metrics as `(name, value)` rows, in a fixed order.
pub fn summary_rows(summary: &RunSummary, report: &RunReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut push = |k: String, v: String| rows.push((k, v));
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let drops = summary.total_drops();
    let fcts = summary.fcts();
    let qcts = summary.qcts();
    push("duration_ns".into(), summary.duration.0.to_string());
    push("flows".into(), summary.flows.len().to_string());
    push("flows_completed".into(), fcts.len().to_string());
    push("queries".into(), summary.queries.len().to_string());
    push("queries_completed".into(), qcts.len().to_string());
    push("fct_p50_ns".into(), opt(percentile(&fcts, 50.0).map(|v| v as f64)));
    push("fct_p99_ns".into(), opt(percentile(&fcts, 99.0).map(|v| v as f64)));
    push("qct_p50_ns".into(), opt(percentile(&qcts, 50.0).map(|v| v as f64)));
    push("qct_p99_ns".into(), opt(percentile(&qcts, 99.0).map(|v| v as f64)));
    push("tail_drop_packets".into(), drops.tail_packets.to_string());
    push("tail_drop_cells".into(), drops.tail_cells.to_string());
    push("head_drop_packets".into(), drops.head_packets.to_string());
    push("head_drop_cells".into(), drops.head_cells.to_string());
    push("mean_free_cells".into(), format!("{}", summary.mean_free_cells));
    push(
        "expulsion_rate_cells_per_sec".into(),
        format!("{}", summary.expulsion_rate_cells_per_sec),
    );
    push("tokens_generated".into(), report.tokens_generated.to_string());
    push(
        "buffer_util_at_drop_p50".into(),
        opt(percentile(&summary.buffer_utilization_at_drop, 50.0)),
    );
    push(
        "bandwidth_util_at_drop_p50".into(),
        opt(percentile(&summary.bandwidth_utilization_at_drop, 50.0)),
    );
    push(
        "cell_data_reads".into(),
        (report.transmit_cost.cell_data_reads + report.drop_cost.cell_data_reads).to_string(),
    );
    for (q, (max, mean)) in summary
        .max_queue_cells
        .iter()
        .zip(&summary.mean_queue_cells)
        .enumerate()
    {
        push(format!("q{q}_max_cells"), max.to_string());
        push(format!("q{q}_mean_cells"), format!("{mean}"));
    }
    for (class, d) in &summary.drops_by_class {
        push(format!("class{class}_drop_packets"), d.total_packets().to_string());
    }
    rows
}

pub fn write_summary_csv<W: Write>(summary: &RunSummary, report: &RunReport, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "value"])?;
    for (k, v) in summary_rows(summary, report) {
        out.write_record([k, v])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs `workload` with the burst generator resized to `bytes` and reports
/// whether any of the burst's packets were dropped.
pub fn burst_drops(
    config: &EngineConfig,
    workload: &WorkloadSpec,
    burst_generator: usize,
    bytes: u64,
) -> Result<bool, MetricsError> {
    let mut w = workload.clone();
    match w.generators.get_mut(burst_generator) {
        Some(GeneratorSpec::RawBurst {
            burst_size_bytes, ..
        }) => *burst_size_bytes = bytes,
        _ => {
            return Err(MetricsError::Burst(format!(
                "generator {burst_generator} is not a raw burst"
            )))
        }
    }
    let (plans, _) = expand_workload(&w, config.sim_duration, config.random_seed);
    let burst_flows: HashSet<FlowId> = plans
        .iter()
        .filter(|p| p.generator == burst_generator)
        .map(|p| p.flow_id)
        .collect();
    let mut dropped = false;
    let mut sink = FnSink(|ev: EventRecord| {
        dropped |= ev.kind.is_drop() && burst_flows.contains(&ev.flow_id);
    });
    run_with_sink(config, &w, &mut sink)?;
    Ok(dropped)
}

/// Largest burst (in bytes) the policy absorbs without dropping a burst packet.
///
/// Binary search over whole packets between one packet and `max_bytes`, so the
/// answer is within one packet (at most one MTU) of the true capacity. Returns
/// 0 when even a single packet is dropped.
pub fn burst_absorption_capacity(
    config: &EngineConfig,
    workload: &WorkloadSpec,
    burst_generator: usize,
    max_bytes: u64,
) -> Result<u64, MetricsError> {
    let pkt = match workload.generators.get(burst_generator) {
        Some(GeneratorSpec::RawBurst { packet_bytes, .. }) => *packet_bytes as u64,
        _ => {
            return Err(MetricsError::Burst(format!(
                "generator {burst_generator} is not a raw burst"
            )))
        }
    };
    let drops = |n: u64| burst_drops(config, workload, burst_generator, n * pkt);
    let (mut lo, mut hi) = (1u64, (max_bytes / pkt).max(1));
    if drops(lo)? {
        return Ok(0);
    }
    if !drops(hi)? {
        return Ok(hi * pkt);
    }
    // invariant: lo absorbed, hi dropped
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if drops(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo * pkt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admission::{AdmissionPolicy, Alpha, PolicyKind};
    use crate::engine::run;
    use crate::model::{PortSpec, SchedulerKind};

    fn ev(t: u64, kind: EventKind, q: QueueId, cells: u32) -> EventRecord {
        EventRecord {
            time: SimTime(t),
            kind,
            queue_id: q,
            flow_id: 0,
            length_cells: cells,
        }
    }

    fn tiny_config(b: u32) -> EngineConfig {
        let ports = vec![PortSpec {
            port_id: 0,
            line_rate_bits_per_sec: 10_000_000_000,
            queue_ids: vec![0, 1],
            scheduler_kind: SchedulerKind::RoundRobin,
        }];
        let policy = AdmissionPolicy::uniform(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 2);
        EngineConfig::new(ports, b, policy, SimTime::from_micros(10))
    }

    fn empty_report(c: &EngineConfig) -> RunReport {
        run(c, &WorkloadSpec::default()).unwrap().report
    }

    #[test]
    fn no_drops_no_samples() {
        let c = tiny_config(90);
        let events = vec![ev(0, EventKind::Admit, 0, 5), ev(10, EventKind::DequeueStart, 0, 5)];
        let s = summarize(events, &c, &empty_report(&c)).unwrap();
        assert!(s.buffer_utilization_at_drop.is_empty());
        assert!(s.bandwidth_utilization_at_drop.is_empty());
    }

    #[test]
    fn buffer_utilization_at_drop_uses_free_cells() {
        let c = tiny_config(90);
        // free = 30 = B/3 at the drop
        let events = vec![ev(0, EventKind::Admit, 0, 60), ev(5, EventKind::TailDrop, 1, 5)];
        let s = summarize(events, &c, &empty_report(&c)).unwrap();
        assert_eq!(s.buffer_utilization_at_drop.len(), 1);
        assert!((s.buffer_utilization_at_drop[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.drops_by_queue[1].tail_packets, 1);
    }

    #[test]
    fn out_of_order_stream_rejected() {
        let c = tiny_config(90);
        let events = vec![ev(10, EventKind::Arrival, 0, 1), ev(5, EventKind::Arrival, 0, 1)];
        assert!(matches!(
            summarize(events, &c, &empty_report(&c)),
            Err(MetricsError::OutOfOrder { index: 1 })
        ));
    }

    #[test]
    fn bandwidth_utilization_counts_recent_transmissions() {
        let c = tiny_config(90);
        // one port at 10G: slot 160ns, so a 1us window holds 6.25 cells
        let events = vec![
            ev(0, EventKind::Admit, 0, 10),
            ev(0, EventKind::DequeueStart, 0, 5),
            ev(500, EventKind::TailDrop, 1, 1),
            ev(1_500, EventKind::TailDrop, 1, 1),
        ];
        let s = summarize(events, &c, &empty_report(&c)).unwrap();
        assert!((s.bandwidth_utilization_at_drop[0] - 5.0 / 6.25).abs() < 1e-12);
        assert_eq!(s.bandwidth_utilization_at_drop[1], 0.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[7u64; 100], 99.0), Some(7));
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 100.0), Some(100));
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 1.0), Some(1.0));
        assert_eq!(percentile::<u64>(&[], 50.0), None);
    }

    #[test]
    fn slowdown_ratio() {
        assert_eq!(slowdown(SimTime::from_millis(2), SimTime::from_millis(1)).unwrap(), 2.0);
        assert_eq!(slowdown(SimTime(5), SimTime(5)).unwrap(), 1.0);
        assert!(matches!(
            slowdown(SimTime(5), SimTime::ZERO),
            Err(MetricsError::ZeroIdeal)
        ));
    }

    #[test]
    fn time_average_weights_by_duration() {
        let mut a = TimeAverage::default();
        a.set(SimTime(0), 10.0);
        a.set(SimTime(30), 0.0);
        assert_eq!(a.mean_until(SimTime(100)), Some(3.0));
    }

    #[test]
    fn queue_trace_samples_on_grid() {
        let events = vec![ev(0, EventKind::Admit, 0, 4), ev(250, EventKind::DequeueStart, 0, 4)];
        let t = queue_trace(events, 10, 1, SimTime(100), SimTime(300)).unwrap();
        let occ: Vec<u32> = t.iter().map(|s| s.occupancy_cells[0]).collect();
        assert_eq!(occ, vec![4, 4, 4, 0]);
        assert_eq!(t[3].free_cells, 10);
    }

    #[test]
    fn pushout_burst_into_empty_buffer_fills_it() {
        let mut c = tiny_config(100);
        c.policy = AdmissionPolicy::uniform(PolicyKind::Pushout, Alpha::integer(1).unwrap(), 2);
        let w = WorkloadSpec {
            generators: vec![GeneratorSpec::RawBurst {
                start: SimTime::ZERO,
                burst_size_bytes: 0,
                packet_bytes: 1000,
                rate_bps: None,
                queue: 0,
                priority_class: 0,
            }],
        };
        // 100 cells of buffer, plus what drains in the slot of arrival
        let cap = burst_absorption_capacity(&c, &w, 0, 100 * 200 * 2).unwrap();
        assert!((cap as i64 - 20_000).abs() <= 1500, "capacity {cap}");
    }

    #[test]
    fn dt_burst_into_empty_buffer_stops_at_half() {
        let c = tiny_config(100);
        let w = WorkloadSpec {
            generators: vec![GeneratorSpec::RawBurst {
                start: SimTime::ZERO,
                burst_size_bytes: 0,
                packet_bytes: 1000,
                rate_bps: None,
                queue: 0,
                priority_class: 0,
            }],
        };
        // α=1 lone queue: admits while occ < free, so about B/2
        let cap = burst_absorption_capacity(&c, &w, 0, 100 * 200 * 2).unwrap();
        assert!((cap as i64 - 10_000).abs() <= 1500, "capacity {cap}");
    }
}
