//! Cells, packet descriptors, queues and the shared buffer.
//!
//! All occupancy is accounted in cells. A packet holds `ceil(len / cell_size)`
//! cells from the moment it is admitted until its descriptor leaves the PD
//! list (dequeue or head-drop), at which point every cell pointer goes back
//! to the free list at once.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub type QueueId = usize;
pub type PortId = usize;
pub type FlowId = u64;

/// Simulated time in integer nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Time needed to serialize `bytes` at `rate_bps`, rounded up to whole nanoseconds.
pub fn serialization_time(bytes: u64, rate_bps: u64) -> SimTime {
    let bits = bytes as u128 * 8 * 1_000_000_000;
    SimTime(bits.div_ceil(rate_bps as u128) as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub cell_size_bytes: u32,
}

impl Default for CellGeometry {
    fn default() -> Self {
        CellGeometry {
            cell_size_bytes: 200,
        }
    }
}

impl CellGeometry {
    pub fn new(cell_size_bytes: u32) -> Result<Self, ModelError> {
        if cell_size_bytes == 0 {
            return Err(ModelError::ZeroCellSize);
        }
        Ok(CellGeometry { cell_size_bytes })
    }

    pub fn cells_for(&self, length_bytes: u32) -> Result<u32, ModelError> {
        cells_for(length_bytes, *self)
    }
}

/// Number of cells a packet of `length_bytes` occupies.
pub fn cells_for(length_bytes: u32, geom: CellGeometry) -> Result<u32, ModelError> {
    if length_bytes == 0 {
        return Err(ModelError::EmptyPacket);
    }
    Ok(length_bytes.div_ceil(geom.cell_size_bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketDescriptor {
    pub flow_id: FlowId,
    pub length_bytes: u32,
    pub length_cells: u32,
    pub arrival_time: SimTime,
    pub priority_class: u8,
    pub seq: u32,
}

impl PacketDescriptor {
    pub fn new(
        flow_id: FlowId,
        length_bytes: u32,
        geom: CellGeometry,
        mtu: u32,
        arrival_time: SimTime,
        priority_class: u8,
        seq: u32,
    ) -> Result<Self, ModelError> {
        if length_bytes > mtu {
            return Err(ModelError::OverMtu { length_bytes, mtu });
        }
        Ok(PacketDescriptor {
            flow_id,
            length_bytes,
            length_cells: cells_for(length_bytes, geom)?,
            arrival_time,
            priority_class,
            seq,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub enqueued_cells: u64,
    pub dequeued: u64,
    pub dequeued_cells: u64,
    pub head_dropped: u64,
    pub head_dropped_cells: u64,
    pub tail_dropped: u64,
    pub tail_dropped_cells: u64,
}

#[derive(Debug, Clone)]
pub struct QueueState {
    pub queue_id: QueueId,
    pub port_id: PortId,
    fifo: VecDeque<PacketDescriptor>,
    occupancy_cells: u32,
    occupancy_bytes: u64,
    pub stats: QueueStats,
}

impl QueueState {
    pub fn new(queue_id: QueueId, port_id: PortId) -> Self {
        QueueState {
            queue_id,
            port_id,
            fifo: VecDeque::new(),
            occupancy_cells: 0,
            occupancy_bytes: 0,
            stats: QueueStats::default(),
        }
    }

    pub fn occupancy_cells(&self) -> u32 {
        self.occupancy_cells
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.occupancy_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn len_packets(&self) -> usize {
        self.fifo.len()
    }

    pub fn head(&self) -> Option<&PacketDescriptor> {
        self.fifo.front()
    }

    pub fn packets(&self) -> impl Iterator<Item = &PacketDescriptor> {
        self.fifo.iter()
    }

    fn push(&mut self, pd: PacketDescriptor) {
        self.occupancy_cells += pd.length_cells;
        self.occupancy_bytes += pd.length_bytes as u64;
        self.stats.enqueued += 1;
        self.stats.enqueued_cells += pd.length_cells as u64;
        self.fifo.push_back(pd);
    }

    fn pop(&mut self) -> Option<PacketDescriptor> {
        let pd = self.fifo.pop_front()?;
        self.occupancy_cells -= pd.length_cells;
        self.occupancy_bytes -= pd.length_bytes as u64;
        Some(pd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[serde(alias = "rr")]
    RoundRobin,
    Drr,
    #[serde(alias = "sp")]
    StrictPriority,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortSpec {
    pub port_id: PortId,
    pub line_rate_bits_per_sec: u64,
    pub queue_ids: Vec<QueueId>,
    pub scheduler_kind: SchedulerKind,
}

/// Global buffer state: capacity `B`, the free-cell count and every queue.
#[derive(Debug, Clone)]
pub struct SharedBufferState {
    capacity_cells: u32,
    free_cells: u32,
    queues: Vec<QueueState>,
}

impl SharedBufferState {
    /// One queue per entry of `queue_ports`, which maps queue id to its port.
    pub fn new(capacity_cells: u32, queue_ports: &[PortId]) -> Self {
        SharedBufferState {
            capacity_cells,
            free_cells: capacity_cells,
            queues: queue_ports
                .iter()
                .enumerate()
                .map(|(q, &p)| QueueState::new(q, p))
                .collect(),
        }
    }

    pub fn capacity_cells(&self) -> u32 {
        self.capacity_cells
    }

    pub fn free_cells(&self) -> u32 {
        self.free_cells
    }

    pub fn used_cells(&self) -> u32 {
        self.capacity_cells - self.free_cells
    }

    pub fn queues(&self) -> &[QueueState] {
        &self.queues
    }

    pub fn queue(&self, q: QueueId) -> &QueueState {
        &self.queues[q]
    }

    pub fn num_queues(&self) -> usize {
        self.queues.len()
    }

    /// Appends `pd` to queue `q`, taking its cells from the free list.
    pub fn enqueue(&mut self, q: QueueId, pd: PacketDescriptor) -> Result<(), ModelError> {
        if pd.length_cells > self.free_cells {
            return Err(ModelError::InsufficientFreeCells {
                needed: pd.length_cells,
                free: self.free_cells,
            });
        }
        self.free_cells -= pd.length_cells;
        self.queues[q].push(pd);
        Ok(())
    }

    /// Removes the head of queue `q` for transmission and frees its cells.
    pub fn dequeue_head(&mut self, q: QueueId) -> Result<PacketDescriptor, ModelError> {
        let pd = self.queues[q].pop().ok_or(ModelError::NoPacket(q))?;
        self.free_cells += pd.length_cells;
        let st = &mut self.queues[q].stats;
        st.dequeued += 1;
        st.dequeued_cells += pd.length_cells as u64;
        Ok(pd)
    }

    /// Same state change as [`dequeue_head`](Self::dequeue_head), but the packet is
    /// accounted as dropped from the head rather than transmitted.
    pub fn remove_head_for_drop(&mut self, q: QueueId) -> Option<PacketDescriptor> {
        let pd = self.queues[q].pop()?;
        self.free_cells += pd.length_cells;
        let st = &mut self.queues[q].stats;
        st.head_dropped += 1;
        st.head_dropped_cells += pd.length_cells as u64;
        Some(pd)
    }

    pub fn record_tail_drop(&mut self, q: QueueId, cells: u32) {
        let st = &mut self.queues[q].stats;
        st.tail_dropped += 1;
        st.tail_dropped_cells += cells as u64;
    }

    /// `free + Σ occupancy == capacity`, and each queue's counters agree with its FIFO.
    pub fn check_conservation(&self) -> Result<(), ModelError> {
        self.check_totals()?;
        for q in &self.queues {
            let cells: u64 = q.fifo.iter().map(|p| p.length_cells as u64).sum();
            let bytes: u64 = q.fifo.iter().map(|p| p.length_bytes as u64).sum();
            if cells != q.occupancy_cells as u64 || bytes != q.occupancy_bytes {
                return Err(ModelError::QueueAccounting(q.queue_id));
            }
        }
        Ok(())
    }

    /// The cheap part of [`check_conservation`](Self::check_conservation): cell
    /// totals and per-queue counters, without walking the FIFOs.
    pub fn check_totals(&self) -> Result<(), ModelError> {
        let resident: u64 = self.queues.iter().map(|q| q.occupancy_cells as u64).sum();
        if self.free_cells as u64 + resident != self.capacity_cells as u64 {
            return Err(ModelError::Conservation {
                free: self.free_cells,
                resident,
                capacity: self.capacity_cells,
            });
        }
        for q in &self.queues {
            let out = q.stats.dequeued_cells + q.stats.head_dropped_cells + q.occupancy_cells as u64;
            if q.stats.enqueued_cells != out {
                return Err(ModelError::Leak {
                    queue: q.queue_id,
                    enqueued: q.stats.enqueued_cells,
                    accounted: out,
                });
            }
        }
        Ok(())
    }
}
