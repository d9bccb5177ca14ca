//! Slot-driven event loop of the traffic manager.
//!
//! Time advances one cell-slot of the aggregate fabric at a time. Within a
//! slot the order is fixed: token refill, arrivals through admission, port
//! departures, bitmap refresh, then at most `max_head_drops_per_slot`
//! expulsions.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use serde::{Deserialize, Serialize};

use crate::admission::{admit, pushout_victim, AdmissionPolicy, Decision, PolicyKind};
use crate::error::{EngineError, TraceError};
use crate::expulsion::{
    arbitrate, head_drop, is_over_allocated, refresh_bitmap_into, ArbiterRequest, DequeueAction,
    Grant, OverAllocationBitmap, PipelineCost, Requester, RoundRobinPointer, TokenBucket,
    Withdrawal,
};
use crate::model::{
    CellGeometry, FlowId, PacketDescriptor, PortId, PortSpec, QueueId, QueueStats,
    SharedBufferState, SimTime,
};
use crate::scheduling::{pick_next, SchedulerState, DEFAULT_DRR_QUANTUM};
use crate::traffic::{expand_workload, GeneratorSpec, PlanKind, WorkloadSpec};
use crate::transport::{
    Emission, FlowState, PacedSource, Source, DEFAULT_RTO, DEFAULT_WINDOW_BYTES,
};

pub const DEFAULT_MTU: u32 = 1500;
pub const BUFFER_BYTES_PER_PORT_PER_GBPS: u64 = 5120;

/// Credit units per byte of port progress: a port earns `rate_bps * ns` per slot.
const BYTE_COST: u64 = 8_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    Admit,
    TailDrop,
    HeadDrop,
    DequeueStart,
    DequeueComplete,
    PushoutExpel,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Arrival,
        EventKind::Admit,
        EventKind::TailDrop,
        EventKind::HeadDrop,
        EventKind::DequeueStart,
        EventKind::DequeueComplete,
        EventKind::PushoutExpel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Arrival => "Arrival",
            EventKind::Admit => "Admit",
            EventKind::TailDrop => "TailDrop",
            EventKind::HeadDrop => "HeadDrop",
            EventKind::DequeueStart => "DequeueStart",
            EventKind::DequeueComplete => "DequeueComplete",
            EventKind::PushoutExpel => "PushoutExpel",
        }
    }

    pub fn is_drop(self) -> bool {
        matches!(
            self,
            EventKind::TailDrop | EventKind::HeadDrop | EventKind::PushoutExpel
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub time: SimTime,
    pub kind: EventKind,
    pub queue_id: QueueId,
    pub flow_id: FlowId,
    pub length_cells: u32,
}

impl fmt::Display for EventRecord {
    /// One trace line without the newline: `time_ns kind queue_id flow_id length_cells`, tab-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.time.0, self.kind, self.queue_id, self.flow_id, self.length_cells
        )
    }
}

impl EventRecord {
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self, TraceError> {
        let err = |msg: String| TraceError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<u64, TraceError> {
            fields[i]
                .parse()
                .map_err(|e| err(format!("field {}: {e}", i + 1)))
        };
        Ok(EventRecord {
            time: SimTime(num(0)?),
            kind: fields[1].parse().map_err(err)?,
            queue_id: num(2)? as QueueId,
            flow_id: num(3)?,
            length_cells: num(4)? as u32,
        })
    }
}

pub fn write_trace<W: Write>(events: &[EventRecord], mut w: W) -> io::Result<()> {
    for ev in events {
        writeln!(w, "{ev}")?;
    }
    w.flush()
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<EventRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.is_empty() {
            out.push(EventRecord::parse_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

/// Receives events in emission order. Sinks must not influence the run.
pub trait EventSink {
    fn record(&mut self, ev: EventRecord);
}

impl EventSink for Vec<EventRecord> {
    fn record(&mut self, ev: EventRecord) {
        self.push(ev);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _ev: EventRecord) {}
}

/// Adapts a closure into a sink.
pub struct FnSink<F>(pub F);

impl<F: FnMut(EventRecord)> EventSink for FnSink<F> {
    fn record(&mut self, ev: EventRecord) {
        (self.0)(ev)
    }
}

/// Forwards events over a bounded channel. A disconnected receiver is ignored.
pub struct ChannelSink(pub SyncSender<EventRecord>);

impl EventSink for ChannelSink {
    fn record(&mut self, ev: EventRecord) {
        let _ = self.0.send(ev);
    }
}

/// Writes trace lines as events arrive; the first I/O error is kept and later writes skipped.
pub struct TraceSink<W: Write> {
    writer: W,
    error: Option<io::Error>,
}

impl<W: Write> TraceSink<W> {
    pub fn new(writer: W) -> Self {
        TraceSink {
            writer,
            error: None,
        }
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write> EventSink for TraceSink<W> {
    fn record(&mut self, ev: EventRecord) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.writer, "{ev}") {
                self.error = Some(e);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TransportParams {
    pub window_bytes: u64,
    pub rto: SimTime,
    /// Delay between a delivery or drop in the switch and the sender learning of it.
    pub feedback_delay: SimTime,
}

impl Default for TransportParams {
    fn default() -> Self {
        TransportParams {
            window_bytes: DEFAULT_WINDOW_BYTES,
            rto: DEFAULT_RTO,
            feedback_delay: SimTime::ZERO,
        }
    }
}

/// Token bucket overrides; `None` derives the value from the fabric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TokenParams {
    pub interval: Option<SimTime>,
    pub burst_cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub ports: Vec<PortSpec>,
    /// Strict-priority rank per queue id (lower is served first). Empty means
    /// the queue's position within its port.
    pub queue_ranks: Vec<u32>,
    /// DRR quantum in bytes per queue id. Empty means the default quantum.
    pub queue_quanta: Vec<u64>,
    pub buffer_cells: u32,
    pub geometry: CellGeometry,
    pub mtu_bytes: u32,
    pub policy: AdmissionPolicy,
    pub expulsion_enabled: bool,
    pub tokens: TokenParams,
    /// Memory bandwidth of the fabric; defaults to the sum of port rates.
    pub aggregate_bps: Option<u64>,
    pub max_head_drops_per_slot: u32,
    pub transport: TransportParams,
    pub random_seed: u64,
    pub sim_duration: SimTime,
    /// Check cell conservation after every slot.
    pub check_every_slot: bool,
    pub audit_tokens: bool,
}

impl EngineConfig {
    /// A config with defaults for everything but the topology, buffer and policy.
    pub fn new(
        ports: Vec<PortSpec>,
        buffer_cells: u32,
        policy: AdmissionPolicy,
        sim_duration: SimTime,
    ) -> Self {
        EngineConfig {
            ports,
            queue_ranks: Vec::new(),
            queue_quanta: Vec::new(),
            buffer_cells,
            geometry: CellGeometry::default(),
            mtu_bytes: DEFAULT_MTU,
            expulsion_enabled: policy.kind == PolicyKind::Occamy,
            policy,
            tokens: TokenParams::default(),
            aggregate_bps: None,
            max_head_drops_per_slot: 1,
            transport: TransportParams::default(),
            random_seed: 0,
            sim_duration,
            check_every_slot: cfg!(debug_assertions),
            audit_tokens: false,
        }
    }

    pub fn num_queues(&self) -> usize {
        self.ports.iter().map(|p| p.queue_ids.len()).sum()
    }

    /// Port of every queue, indexed by queue id.
    pub fn queue_ports(&self) -> Vec<PortId> {
        let mut out = vec![0; self.num_queues()];
        for p in &self.ports {
            for &q in &p.queue_ids {
                out[q] = p.port_id;
            }
        }
        out
    }

    pub fn aggregate_rate_bps(&self) -> u64 {
        self.aggregate_bps
            .unwrap_or_else(|| self.ports.iter().map(|p| p.line_rate_bits_per_sec).sum())
    }

    /// Length of one cell-slot of the aggregate fabric.
    pub fn slot(&self) -> SimTime {
        TokenBucket::interval_for(self.aggregate_rate_bps(), self.geometry.cell_size_bytes)
    }

    pub fn token_interval(&self) -> SimTime {
        self.tokens.interval.unwrap_or_else(|| self.slot())
    }

    /// Default: enough for one MTU packet, and at least one token per port.
    pub fn burst_cap(&self) -> u64 {
        self.tokens.burst_cap.unwrap_or_else(|| {
            let mtu_cells = self.mtu_bytes.div_ceil(self.geometry.cell_size_bytes) as u64;
            mtu_cells.max(self.ports.len() as u64)
        })
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.ports.is_empty() {
            return bad("no ports".into());
        }
        let n = self.num_queues();
        let mut seen = vec![false; n];
        for (i, p) in self.ports.iter().enumerate() {
            if p.port_id != i {
                return bad(format!("port {i} has port_id {}", p.port_id));
            }
            if p.line_rate_bits_per_sec == 0 {
                return bad(format!("port {i} has zero line rate"));
            }
            if p.queue_ids.is_empty() {
                return bad(format!("port {i} has no queues"));
            }
            for &q in &p.queue_ids {
                if q >= n || seen[q] {
                    return bad(format!("queue ids must be 0..{n}, each on one port; got {q} on port {i}"));
                }
                seen[q] = true;
            }
        }
        if self.policy.per_queue_alpha.len() != n {
            return bad(format!(
                "policy has {} alphas for {n} queues",
                self.policy.per_queue_alpha.len()
            ));
        }
        if !self.queue_ranks.is_empty() && self.queue_ranks.len() != n {
            return bad(format!("{} queue ranks for {n} queues", self.queue_ranks.len()));
        }
        if !self.queue_quanta.is_empty() && self.queue_quanta.len() != n {
            return bad(format!("{} DRR quanta for {n} queues", self.queue_quanta.len()));
        }
        if self.queue_quanta.contains(&0) {
            return bad("DRR quantum must be positive".into());
        }
        if self.geometry.cell_size_bytes == 0 {
            return bad("zero cell size".into());
        }
        if self.mtu_bytes == 0 {
            return bad("zero MTU".into());
        }
        if self.mtu_bytes.div_ceil(self.geometry.cell_size_bytes) > self.buffer_cells {
            return bad("buffer smaller than one MTU packet".into());
        }
        if self.aggregate_bps == Some(0) {
            return bad("zero aggregate rate".into());
        }
        if self.tokens.interval == Some(SimTime::ZERO) {
            return bad("zero token interval".into());
        }
        if self.transport.rto == SimTime::ZERO {
            return bad("zero RTO".into());
        }
        Ok(())
    }

    pub fn validate_workload(&self, workload: &WorkloadSpec) -> Result<(), EngineError> {
        let n = self.num_queues();
        for (g, spec) in workload.generators.iter().enumerate() {
            let bad = |m: &str| Err(EngineError::Config(format!("generator {g}: {m}")));
            if spec.queues().is_empty() {
                return bad("no destination queue");
            }
            if let Some(q) = spec.queues().into_iter().find(|&q| q >= n) {
                return bad(&format!("queue {q} does not exist"));
            }
            let (pkt, rate) = match spec {
                GeneratorSpec::PoissonFlows {
                    sender_rate_bps, ..
                }
                | GeneratorSpec::IncastQuery {
                    sender_rate_bps, ..
                } => (self.mtu_bytes, Some(*sender_rate_bps)),
                GeneratorSpec::LongLived {
                    packet_bytes,
                    rate_bps,
                    flow_count,
                    ..
                } => {
                    if *flow_count == 0 {
                        return bad("zero flow count");
                    }
                    (*packet_bytes, Some(*rate_bps))
                }
                GeneratorSpec::RawBurst {
                    packet_bytes,
                    rate_bps,
                    ..
                } => (*packet_bytes, *rate_bps),
            };
            if pkt == 0 || pkt > self.mtu_bytes {
                return bad(&format!("packet size {pkt} outside 1..={}", self.mtu_bytes));
            }
            if rate == Some(0) {
                return bad("zero rate");
            }
            if let GeneratorSpec::IncastQuery { fan_in: 0, .. } = spec {
                return bad("zero fan-in");
            }
        }
        Ok(())
    }
}

/// Buffer size for the given ports at 5.12KB per port per Gbps, in cells.
pub fn default_buffer_cells(ports: &[PortSpec], geometry: CellGeometry) -> u32 {
    let bytes: u64 = ports
        .iter()
        .map(|p| p.line_rate_bits_per_sec * BUFFER_BYTES_PER_PORT_PER_GBPS / 1_000_000_000)
        .sum();
    (bytes / geometry.cell_size_bytes as u64) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub flow_id: FlowId,
    pub queue: QueueId,
    pub priority_class: u8,
    /// Flow size for reliable flows; bytes emitted for open-loop sources.
    pub bytes: u64,
    pub reliable: bool,
    pub start: SimTime,
    pub finish: Option<SimTime>,
    pub retransmissions: u64,
    pub query: Option<u64>,
}

impl FlowRecord {
    pub fn fct(&self) -> Option<SimTime> {
        self.finish.map(|f| f.saturating_sub(self.start))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub issue_time: SimTime,
    pub flow_ids: Vec<FlowId>,
    /// Latest finish among member flows, once all have finished.
    pub completion: Option<SimTime>,
}

impl QueryRecord {
    pub fn qct(&self) -> Option<SimTime> {
        self.completion.map(|c| c.saturating_sub(self.issue_time))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TokenOp {
    Refill,
    Tx,
    Expel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenAudit {
    pub time: SimTime,
    pub op: TokenOp,
    pub cells: u64,
    pub level_after: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub flows: Vec<FlowRecord>,
    pub queries: Vec<QueryRecord>,
    pub queue_stats: Vec<QueueStats>,
    pub final_occupancy_cells: Vec<u32>,
    pub final_free_cells: u32,
    pub capacity_cells: u32,
    pub tokens_generated: u64,
    pub transmit_cost: PipelineCost,
    pub drop_cost: PipelineCost,
    pub token_audit: Vec<TokenAudit>,
    pub slot: SimTime,
    pub slots_executed: u64,
    pub end_time: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub events: Vec<EventRecord>,
    pub report: RunReport,
}

pub fn run(config: &EngineConfig, workload: &WorkloadSpec) -> Result<RunOutput, EngineError> {
    let mut events = Vec::new();
    let report = run_with_sink(config, workload, &mut events)?;
    Ok(RunOutput { events, report })
}

pub fn run_with_sink<S: EventSink>(
    config: &EngineConfig,
    workload: &WorkloadSpec,
    sink: &mut S,
) -> Result<RunReport, EngineError> {
    let mut engine = Engine::new(config.clone(), workload)?;
    while !engine.is_done() {
        engine.step_slot(sink)?;
    }
    engine.finish()
}

/// Runs the engine on the calling thread while `consumer` folds the event
/// stream on another, connected by a channel holding at most `capacity` events.
pub fn run_streaming<T, F>(
    config: &EngineConfig,
    workload: &WorkloadSpec,
    capacity: usize,
    consumer: F,
) -> Result<(RunReport, T), EngineError>
where
    T: Send,
    F: FnOnce(Receiver<EventRecord>) -> T + Send,
{
    let (tx, rx) = sync_channel(capacity);
    std::thread::scope(|s| {
        let handle = s.spawn(move || consumer(rx));
        let report = {
            let mut sink = ChannelSink(tx);
            run_with_sink(config, workload, &mut sink)
        };
        let folded = handle.join().expect("event consumer panicked");
        report.map(|r| (r, folded))
    })
}

struct InFlight {
    queue: QueueId,
    pd: PacketDescriptor,
    sent_bytes: u64,
    charged_cells: u32,
}

struct SourceEntry {
    source: Source,
    queue: QueueId,
    class: u8,
    start: SimTime,
    query: Option<u64>,
    emitted_bytes: u64,
    /// Time of the live wake-heap entry, if any.
    scheduled: Option<SimTime>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum FeedbackKind {
    Delivered,
    Lost,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Feedback {
    due: SimTime,
    order: u64,
    flow: FlowId,
    seq: u32,
    kind: FeedbackKind,
    at: SimTime,
}

/// One switch instance. Drive it with [`step_slot`](Engine::step_slot) or use [`run`].
pub struct Engine {
    config: EngineConfig,
    buf: SharedBufferState,
    schedulers: Vec<SchedulerState>,
    in_flight: Vec<Option<InFlight>>,
    credit: Vec<u64>,
    bucket: TokenBucket,
    bitmap: OverAllocationBitmap,
    rr: RoundRobinPointer,
    sources: Vec<SourceEntry>,
    wakes: BinaryHeap<Reverse<(SimTime, FlowId)>>,
    feedback: BinaryHeap<Reverse<Feedback>>,
    feedback_order: u64,
    queries: Vec<QueryRecord>,
    now: SimTime,
    slot: SimTime,
    slots_executed: u64,
    tokens_generated: u64,
    transmit_cost: PipelineCost,
    drop_cost: PipelineCost,
    token_audit: Vec<TokenAudit>,
    emissions: Vec<(Emission, FlowId)>,
    scratch: Vec<Emission>,
    done: bool,
}

impl Engine {
    pub fn new(config: EngineConfig, workload: &WorkloadSpec) -> Result<Self, EngineError> {
        config.validate()?;
        config.validate_workload(workload)?;
        let n = config.num_queues();
        let buf = SharedBufferState::new(config.buffer_cells, &config.queue_ports());
        let schedulers = config
            .ports
            .iter()
            .map(|p| {
                let ranks = p
                    .queue_ids
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| config.queue_ranks.get(q).copied().unwrap_or(i as u32))
                    .collect();
                let quanta = p
                    .queue_ids
                    .iter()
                    .map(|&q| config.queue_quanta.get(q).copied().unwrap_or(DEFAULT_DRR_QUANTUM))
                    .collect();
                SchedulerState::new(p.scheduler_kind, p.queue_ids.len())
                    .with_priorities(ranks)
                    .with_quanta(quanta)
            })
            .collect();
        let slot = config.slot();
        let bucket = TokenBucket::new(config.token_interval(), config.burst_cap());
        let window = (config.transport.window_bytes / config.mtu_bytes as u64).max(1) as u32;

        let (plans, query_plans) =
            expand_workload(workload, config.sim_duration, config.random_seed);
        let mut sources = Vec::with_capacity(plans.len());
        let mut wakes = BinaryHeap::new();
        for (i, plan) in plans.into_iter().enumerate() {
            debug_assert_eq!(plan.flow_id, i as FlowId);
            let source = match plan.kind {
                PlanKind::Reliable {
                    bytes,
                    sender_rate_bps,
                } => Source::Flow(FlowState::new(
                    plan.flow_id,
                    bytes.max(1),
                    config.mtu_bytes,
                    window,
                    config.transport.rto,
                    sender_rate_bps,
                    plan.start,
                )),
                PlanKind::OpenLoop {
                    packet_bytes,
                    rate_bps,
                    total_bytes,
                    stop,
                } => Source::Paced(PacedSource::new(
                    plan.flow_id,
                    packet_bytes,
                    rate_bps,
                    plan.start,
                    stop,
                    total_bytes,
                )),
            };
            let scheduled = source.next_wake();
            if let Some(t) = scheduled {
                wakes.push(Reverse((t, plan.flow_id)));
            }
            sources.push(SourceEntry {
                source,
                queue: plan.queue,
                class: plan.priority_class,
                start: plan.start,
                query: plan.query,
                emitted_bytes: 0,
                scheduled,
            });
        }
        let queries = query_plans
            .into_iter()
            .map(|q| QueryRecord {
                query_id: q.query_id,
                issue_time: q.issue_time,
                flow_ids: q.flow_ids,
                completion: None,
            })
            .collect();

        Ok(Engine {
            buf,
            schedulers,
            in_flight: (0..config.ports.len()).map(|_| None).collect(),
            credit: vec![0; config.ports.len()],
            bucket,
            bitmap: OverAllocationBitmap::new(n),
            rr: RoundRobinPointer::default(),
            sources,
            wakes,
            feedback: BinaryHeap::new(),
            feedback_order: 0,
            queries,
            now: SimTime::ZERO,
            slot,
            slots_executed: 0,
            tokens_generated: 0,
            transmit_cost: PipelineCost::default(),
            drop_cost: PipelineCost::default(),
            token_audit: Vec::new(),
            emissions: Vec::new(),
            scratch: Vec::new(),
            done: config.sim_duration == SimTime::ZERO,
            config,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn slot(&self) -> SimTime {
        self.slot
    }

    pub fn buffer(&self) -> &SharedBufferState {
        &self.buf
    }

    pub fn tokens(&self) -> &TokenBucket {
        &self.bucket
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn bitmap(&self) -> &OverAllocationBitmap {
        &self.bitmap
    }

    /// True once the clock reached `sim_duration` or nothing can happen any more.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Puts a packet straight into a queue, bypassing admission. For building test states.
    pub fn preload(&mut self, q: QueueId, pd: PacketDescriptor) -> Result<(), EngineError> {
        self.buf
            .enqueue(q, pd)
            .map_err(|source| EngineError::Invariant {
                slot: self.slots_executed,
                source,
            })
    }

    /// Executes one cell-slot and advances the clock.
    pub fn step_slot<S: EventSink>(&mut self, sink: &mut S) -> Result<(), EngineError> {
        let now = self.now;
        let end = now + self.slot;

        // (1) tokens
        let credited = self.bucket.refill(now);
        self.tokens_generated += credited;
        if credited > 0 {
            self.audit(TokenOp::Refill, credited);
        }

        // (2) feedback, then source wakes, then admission
        self.apply_feedback(end);
        self.collect_emissions(end);
        let mut emissions = std::mem::take(&mut self.emissions);
        emissions.sort_by_key(|(e, f)| (e.time, *f, e.seq));
        for (e, flow) in emissions.drain(..) {
            self.arrive(e, flow, sink)?;
        }
        self.emissions = emissions;

        // (3) ports
        let scheduler_request = self.serve_ports(sink);

        // (4) bitmap
        if self.config.policy.kind == PolicyKind::Occamy {
            refresh_bitmap_into(&self.buf, &self.config.policy, &mut self.bitmap);
        }

        // (5) expulsion
        if self.config.expulsion_enabled {
            self.expel(scheduler_request, sink);
        }

        if self.config.check_every_slot {
            self.buf
                .check_totals()
                .map_err(|source| EngineError::Invariant {
                    slot: self.slots_executed,
                    source,
                })?;
        }

        // (6) clock
        self.slots_executed += 1;
        self.advance_clock(end);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunReport, EngineError> {
        self.buf
            .check_conservation()
            .map_err(|source| EngineError::Invariant {
                slot: self.slots_executed,
                source,
            })?;
        let flows: Vec<FlowRecord> = self
            .sources
            .iter()
            .map(|s| match &s.source {
                Source::Flow(f) => FlowRecord {
                    flow_id: f.flow_id,
                    queue: s.queue,
                    priority_class: s.class,
                    bytes: f.total_bytes,
                    reliable: true,
                    start: s.start,
                    finish: f.finish_time,
                    retransmissions: f.retransmissions,
                    query: s.query,
                },
                Source::Paced(p) => FlowRecord {
                    flow_id: p.flow_id,
                    queue: s.queue,
                    priority_class: s.class,
                    bytes: s.emitted_bytes,
                    reliable: false,
                    start: s.start,
                    finish: None,
                    retransmissions: 0,
                    query: s.query,
                },
            })
            .collect();
        for q in &mut self.queries {
            q.completion = q
                .flow_ids
                .iter()
                .map(|&f| flows[f as usize].finish)
                .collect::<Option<Vec<_>>>()
                .and_then(|v| v.into_iter().max());
        }
        Ok(RunReport {
            flows,
            queries: self.queries,
            queue_stats: self.buf.queues().iter().map(|q| q.stats).collect(),
            final_occupancy_cells: self.buf.queues().iter().map(|q| q.occupancy_cells()).collect(),
            final_free_cells: self.buf.free_cells(),
            capacity_cells: self.buf.capacity_cells(),
            tokens_generated: self.tokens_generated,
            transmit_cost: self.transmit_cost,
            drop_cost: self.drop_cost,
            token_audit: self.token_audit,
            slot: self.slot,
            slots_executed: self.slots_executed,
            end_time: self.now.min(self.config.sim_duration),
        })
    }

    fn audit(&mut self, op: TokenOp, cells: u64) {
        if self.config.audit_tokens {
            self.token_audit.push(TokenAudit {
                time: self.now,
                op,
                cells,
                level_after: self.bucket.tokens,
            });
        }
    }

    fn reschedule(&mut self, flow: FlowId) {
        let entry = &mut self.sources[flow as usize];
        let wake = entry.source.next_wake();
        if wake != entry.scheduled {
            entry.scheduled = wake;
            if let Some(t) = wake {
                self.wakes.push(Reverse((t, flow)));
            }
        }
    }

    fn push_feedback(&mut self, flow: FlowId, seq: u32, kind: FeedbackKind) {
        let reliable = self
            .sources
            .get(flow as usize)
            .is_some_and(|s| matches!(s.source, Source::Flow(_)));
        if !reliable {
            return;
        }
        self.feedback.push(Reverse(Feedback {
            due: self.now + self.config.transport.feedback_delay,
            order: self.feedback_order,
            flow,
            seq,
            kind,
            at: self.now,
        }));
        self.feedback_order += 1;
    }

    fn apply_feedback(&mut self, end: SimTime) {
        while let Some(Reverse(fb)) = self.feedback.peek().copied() {
            if fb.due >= end {
                break;
            }
            self.feedback.pop();
            if let Source::Flow(f) = &mut self.sources[fb.flow as usize].source {
                match fb.kind {
                    FeedbackKind::Delivered => f.on_delivered(fb.seq, fb.at, self.now),
                    FeedbackKind::Lost => f.on_lost(fb.seq, fb.at),
                }
            }
            self.reschedule(fb.flow);
        }
    }

    fn collect_emissions(&mut self, end: SimTime) {
        while let Some(&Reverse((t, flow))) = self.wakes.peek() {
            if t >= end {
                break;
            }
            self.wakes.pop();
            if self.sources[flow as usize].scheduled != Some(t) {
                continue;
            }
            self.sources[flow as usize].scheduled = None;
            let mut out = std::mem::take(&mut self.scratch);
            let entry = &mut self.sources[flow as usize];
            entry.source.poll(end, &mut out);
            for e in out.drain(..) {
                entry.emitted_bytes += e.bytes as u64;
                self.emissions.push((e, flow));
            }
            self.scratch = out;
            self.reschedule(flow);
        }
    }

    fn emit<S: EventSink>(&self, sink: &mut S, kind: EventKind, q: QueueId, flow: FlowId, cells: u32) {
        sink.record(EventRecord {
            time: self.now,
            kind,
            queue_id: q,
            flow_id: flow,
            length_cells: cells,
        });
    }

    fn arrive<S: EventSink>(
        &mut self,
        e: Emission,
        flow: FlowId,
        sink: &mut S,
    ) -> Result<(), EngineError> {
        let entry = &self.sources[flow as usize];
        let q = entry.queue;
        let pd = PacketDescriptor::new(
            flow,
            e.bytes,
            self.config.geometry,
            self.config.mtu_bytes,
            e.time,
            entry.class,
            e.seq,
        )
        .map_err(|source| EngineError::Invariant {
            slot: self.slots_executed,
            source,
        })?;
        let cells = pd.length_cells;
        self.emit(sink, EventKind::Arrival, q, flow, cells);
        let verdict = admit(&self.config.policy, q, &pd, &self.buf);
        let admitted = match verdict.decision {
            Decision::Accept => true,
            Decision::TailDrop => false,
            Decision::AcceptAfterPushout => loop {
                if self.buf.free_cells() >= cells {
                    break true;
                }
                let Some(v) = pushout_victim(&self.buf, q) else {
                    break false;
                };
                let victim = head_drop(&mut self.buf, v).expect("pushout victim holds cells");
                self.drop_cost
                    .add(PipelineCost::of(DequeueAction::HeadDrop, victim.length_cells));
                self.emit(sink, EventKind::PushoutExpel, v, victim.flow_id, victim.length_cells);
                self.push_feedback(victim.flow_id, victim.seq, FeedbackKind::Lost);
            },
        };
        if admitted {
            self.buf
                .enqueue(q, pd)
                .map_err(|source| EngineError::Invariant {
                    slot: self.slots_executed,
                    source,
                })?;
            self.emit(sink, EventKind::Admit, q, flow, cells);
        } else {
            self.buf.record_tail_drop(q, cells);
            self.emit(sink, EventKind::TailDrop, q, flow, cells);
            self.push_feedback(flow, e.seq, FeedbackKind::Lost);
        }
        Ok(())
    }

    /// Returns whether any port issued a dequeue request this slot.
    fn serve_ports<S: EventSink>(&mut self, sink: &mut S) -> Option<ArbiterRequest> {
        let mut request = None;
        let cell = self.config.geometry.cell_size_bytes as u64;
        for p in 0..self.config.ports.len() {
            self.credit[p] += self.config.ports[p].line_rate_bits_per_sec * self.slot.0;
            loop {
                if let Some(tx) = self.in_flight[p].as_mut() {
                    let remaining = tx.pd.length_bytes as u64 - tx.sent_bytes;
                    let affordable = self.credit[p] / BYTE_COST;
                    let sent = remaining.min(affordable);
                    self.credit[p] -= sent * BYTE_COST;
                    tx.sent_bytes += sent;
                    let done_cells = (tx.sent_bytes.div_ceil(cell) as u32).min(tx.pd.length_cells);
                    let delta = done_cells - tx.charged_cells;
                    tx.charged_cells = done_cells;
                    let complete = tx.sent_bytes == tx.pd.length_bytes as u64;
                    if delta > 0 {
                        self.bucket.withdraw(delta, Withdrawal::Tx);
                        self.audit(TokenOp::Tx, delta as u64);
                    }
                    if !complete {
                        break;
                    }
                    let tx = self.in_flight[p].take().expect("in flight");
                    self.emit(sink, EventKind::DequeueComplete, tx.queue, tx.pd.flow_id, tx.pd.length_cells);
                    self.push_feedback(tx.pd.flow_id, tx.pd.seq, FeedbackKind::Delivered);
                } else {
                    let port = &self.config.ports[p];
                    let Some(q) = pick_next(port, &mut self.schedulers[p], &self.buf) else {
                        self.credit[p] = 0;
                        break;
                    };
                    let pd = self.buf.dequeue_head(q).expect("scheduler picked a non-empty queue");
                    self.emit(sink, EventKind::DequeueStart, q, pd.flow_id, pd.length_cells);
                    self.transmit_cost
                        .add(PipelineCost::of(DequeueAction::Transmit, pd.length_cells));
                    request.get_or_insert(ArbiterRequest {
                        source: Requester::OutputScheduler,
                        queue_id: q,
                    });
                    self.in_flight[p] = Some(InFlight {
                        queue: q,
                        pd,
                        sent_bytes: 0,
                        charged_cells: 0,
                    });
                }
            }
        }
        request
    }

    fn expel<S: EventSink>(&mut self, scheduler_request: Option<ArbiterRequest>, sink: &mut S) {
        for _ in 0..self.config.max_head_drops_per_slot {
            let Some(victim) = self.rr.peek(&self.bitmap) else {
                return;
            };
            let Some(cells) = self.buf.queue(victim).head().map(|h| h.length_cells) else {
                return;
            };
            let req = ArbiterRequest {
                source: Requester::HeadDropSelector,
                queue_id: victim,
            };
            if arbitrate(scheduler_request, Some(req), &self.bucket, cells) != Grant::GrantHeadDrop {
                return;
            }
            if !is_over_allocated(&self.buf, &self.config.policy, victim) {
                return;
            }
            if !self.bucket.withdraw(cells, Withdrawal::Expulsion) {
                return;
            }
            let pd = head_drop(&mut self.buf, victim).expect("victim is non-empty");
            self.rr.grant(victim);
            self.audit(TokenOp::Expel, cells as u64);
            self.drop_cost
                .add(PipelineCost::of(DequeueAction::HeadDrop, cells));
            self.emit(sink, EventKind::HeadDrop, victim, pd.flow_id, cells);
            self.push_feedback(pd.flow_id, pd.seq, FeedbackKind::Lost);
            refresh_bitmap_into(&self.buf, &self.config.policy, &mut self.bitmap);
        }
    }

    fn next_pending(&mut self) -> Option<SimTime> {
        while let Some(&Reverse((t, flow))) = self.wakes.peek() {
            if self.sources[flow as usize].scheduled == Some(t) {
                break;
            }
            self.wakes.pop();
        }
        let wake = self.wakes.peek().map(|r| r.0 .0);
        let fb = self.feedback.peek().map(|r| r.0.due);
        match (wake, fb) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn advance_clock(&mut self, end: SimTime) {
        let idle = self.buf.used_cells() == 0 && self.in_flight.iter().all(Option::is_none);
        self.now = end;
        if idle {
            match self.next_pending() {
                None => self.done = true,
                Some(t) if t > end => {
                    self.now = SimTime(t.0 - t.0 % self.slot.0).max(end);
                    self.credit.iter_mut().for_each(|c| *c = 0);
                }
                Some(_) => {}
            }
        }
        if self.now >= self.config.sim_duration {
            self.done = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admission::Alpha;
    use crate::model::SchedulerKind;

    const G10: u64 = 10_000_000_000;

    fn ports(n: usize, queues_per_port: usize) -> Vec<PortSpec> {
        (0..n)
            .map(|p| PortSpec {
                port_id: p,
                line_rate_bits_per_sec: G10,
                queue_ids: (p * queues_per_port..(p + 1) * queues_per_port).collect(),
                scheduler_kind: SchedulerKind::RoundRobin,
            })
            .collect()
    }

    fn config(kind: PolicyKind, alpha: Alpha, n_ports: usize, b: u32) -> EngineConfig {
        let policy = AdmissionPolicy::uniform(kind, alpha, n_ports);
        let mut c = EngineConfig::new(ports(n_ports, 1), b, policy, SimTime::from_millis(1));
        c.check_every_slot = true;
        c
    }

    fn long_lived(queue: QueueId, rate_bps: u64) -> GeneratorSpec {
        GeneratorSpec::LongLived {
            flow_count: 1,
            rate_bps,
            packet_bytes: 1500,
            queue,
            priority_class: 0,
            start: SimTime::ZERO,
            stop: None,
        }
    }

    fn count(events: &[EventRecord], kind: EventKind) -> usize {
        events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn empty_workload_is_a_null_run() {
        let c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 2, 500);
        let out = run(&c, &WorkloadSpec::default()).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.report.final_free_cells, 500);
    }

    #[test]
    fn half_rate_flow_is_never_dropped() {
        let c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 1, 500);
        let w = WorkloadSpec {
            generators: vec![long_lived(0, G10 / 2)],
        };
        let out = run(&c, &w).unwrap();
        assert_eq!(count(&out.events, EventKind::TailDrop), 0);
        assert!(count(&out.events, EventKind::DequeueComplete) > 300);
        let mut occ: i64 = 0;
        let mut max_occ = 0;
        for e in &out.events {
            match e.kind {
                EventKind::Admit => occ += e.length_cells as i64,
                EventKind::DequeueStart => occ -= e.length_cells as i64,
                _ => {}
            }
            max_occ = max_occ.max(occ);
        }
        assert!(max_occ <= 16, "max occupancy {max_occ}");
    }

    #[test]
    fn events_are_time_ordered_and_trace_round_trips() {
        let c = config(PolicyKind::Occamy, Alpha::integer(2).unwrap(), 2, 300);
        let w = WorkloadSpec {
            generators: vec![long_lived(0, 2 * G10), long_lived(1, 3 * G10)],
        };
        let out = run(&c, &w).unwrap();
        assert!(out.events.windows(2).all(|w| w[0].time <= w[1].time));
        let mut text = Vec::new();
        write_trace(&out.events, &mut text).unwrap();
        let back = read_trace(&text[..]).unwrap();
        assert_eq!(back, out.events);
    }

    #[test]
    fn identical_configs_give_identical_traces() {
        let mut c = config(PolicyKind::Occamy, Alpha::integer(4).unwrap(), 2, 300);
        c.random_seed = 7;
        let w = WorkloadSpec {
            generators: vec![long_lived(0, 2 * G10), long_lived(1, 3 * G10)],
        };
        assert_eq!(run(&c, &w).unwrap(), run(&c, &w).unwrap());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 2, 500);
        c.ports[1].line_rate_bits_per_sec = 0;
        assert!(matches!(c.validate(), Err(EngineError::Config(_))));

        let c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 2, 500);
        let w = WorkloadSpec {
            generators: vec![long_lived(5, G10)],
        };
        assert!(Engine::new(c, &w).is_err());
    }

    #[test]
    fn default_buffer_is_5120_bytes_per_port_per_gbps() {
        assert_eq!(default_buffer_cells(&ports(8, 1), CellGeometry::default()), 2048);
    }

    #[test]
    fn slot_is_one_cell_of_aggregate_bandwidth() {
        let c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 8, 2048);
        assert_eq!(c.slot(), SimTime(20));
    }

    fn preload_engine(kind: PolicyKind, cells_per_pkt: u32, pkts: usize) -> Engine {
        let mut c = config(kind, Alpha::integer(1).unwrap(), 2, 200);
        c.aggregate_bps = Some(100 * G10);
        c.tokens.burst_cap = Some(64);
        let mut e = Engine::new(c, &WorkloadSpec::default()).unwrap();
        for i in 0..pkts {
            let pd = PacketDescriptor {
                flow_id: 0,
                length_bytes: cells_per_pkt * 200,
                length_cells: cells_per_pkt,
                arrival_time: SimTime::ZERO,
                priority_class: 0,
                seq: i as u32,
            };
            e.preload(0, pd).unwrap();
        }
        e
    }

    #[test]
    fn scheduler_wins_the_slot_over_head_drop() {
        // queue 0 holds 150 of 200 cells: T = 50, so it is over-allocated
        let mut e = preload_engine(PolicyKind::Occamy, 5, 30);
        e.bucket.tokens = 64;
        let mut events = Vec::new();
        e.step_slot(&mut events).unwrap();
        assert_eq!(events[0].kind, EventKind::DequeueStart);
        assert_eq!(count(&events, EventKind::HeadDrop), 0);
        // next slot the port is still busy with the same packet: one head-drop
        events.clear();
        e.step_slot(&mut events).unwrap();
        assert_eq!(count(&events, EventKind::DequeueStart), 0);
        assert_eq!(count(&events, EventKind::HeadDrop), 1);
    }

    #[test]
    fn one_head_drop_per_free_slot() {
        let mut e = preload_engine(PolicyKind::Occamy, 5, 30);
        let mut events = Vec::new();
        e.step_slot(&mut events).unwrap();
        e.bucket.tokens = 64;
        for _ in 0..3 {
            events.clear();
            e.step_slot(&mut events).unwrap();
            assert_eq!(count(&events, EventKind::HeadDrop), 1);
        }
    }

    #[test]
    fn pushout_expels_before_admitting() {
        let mut c = config(PolicyKind::Pushout, Alpha::integer(1).unwrap(), 2, 40);
        c.sim_duration = SimTime::from_micros(50);
        let w = WorkloadSpec {
            generators: vec![
                GeneratorSpec::RawBurst {
                    start: SimTime::ZERO,
                    burst_size_bytes: 8000,
                    packet_bytes: 1000,
                    rate_bps: None,
                    queue: 0,
                    priority_class: 0,
                },
                GeneratorSpec::RawBurst {
                    start: SimTime(100),
                    burst_size_bytes: 2000,
                    packet_bytes: 1000,
                    rate_bps: None,
                    queue: 1,
                    priority_class: 1,
                },
            ],
        };
        let out = run(&c, &w).unwrap();
        let expel = out
            .events
            .iter()
            .position(|e| e.kind == EventKind::PushoutExpel)
            .expect("an expulsion");
        let next_admit = out.events[expel..]
            .iter()
            .find(|e| e.kind == EventKind::Admit)
            .unwrap();
        assert_eq!(next_admit.queue_id, 1);
        assert_eq!(next_admit.time, out.events[expel].time);
        assert_eq!(count(&out.events, EventKind::TailDrop), 0);
    }

    #[test]
    fn backlogged_port_never_idles() {
        let c = config(PolicyKind::Occamy, Alpha::integer(1).unwrap(), 2, 200);
        let w = WorkloadSpec {
            generators: vec![long_lived(0, 3 * G10), long_lived(1, G10 / 4)],
        };
        let mut e = Engine::new(c, &w).unwrap();
        let mut sink = NullSink;
        while !e.is_done() {
            e.step_slot(&mut sink).unwrap();
            if !e.buffer().queue(0).is_empty() {
                assert!(e.in_flight[0].is_some(), "port idle at {}", e.now());
            }
        }
    }

    #[test]
    fn streaming_consumer_sees_the_same_events() {
        let c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 2, 300);
        let w = WorkloadSpec {
            generators: vec![long_lived(0, 2 * G10)],
        };
        let direct = run(&c, &w).unwrap();
        let (report, streamed) =
            run_streaming(&c, &w, 64, |rx| rx.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(streamed, direct.events);
        assert_eq!(report, direct.report);
    }

    #[test]
    fn reliable_flow_finishes_and_fast_forwards() {
        let mut c = config(PolicyKind::DynamicThreshold, Alpha::integer(1).unwrap(), 1, 500);
        c.sim_duration = SimTime::from_millis(100);
        let w = WorkloadSpec {
            generators: vec![GeneratorSpec::IncastQuery {
                fan_in: 4,
                query_size_bytes: 40_000,
                arrivals: crate::traffic::QueryArrivals::At {
                    times: vec![SimTime::from_millis(50)],
                },
                queue: 0,
                priority_class: 0,
                sender_rate_bps: G10,
                stop: None,
            }],
        };
        let out = run(&c, &w).unwrap();
        let q = &out.report.queries[0];
        let qct = q.qct().expect("query completes");
        // 40KB through a 10G port is 32us; events carry slot-start times
        let lower = SimTime(32_000 - c.slot().0);
        assert!(qct >= lower && qct < SimTime(40_000), "qct {qct}");
        assert!(out.report.slots_executed < 10_000);
    }
}
