//! Per-port output schedulers. Decisions are made one packet at a time.

use crate::model::{PortSpec, QueueId, SchedulerKind, SharedBufferState};

pub const DEFAULT_DRR_QUANTUM: u64 = 1500;

/// Scheduler state of a single port. All vectors are indexed by the queue's
/// position in `PortSpec::queue_ids`.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub kind: SchedulerKind,
    pub rr_pointer: Option<usize>,
    pub drr_deficits: Vec<u64>,
    pub drr_quantum: Vec<u64>,
    /// Lower rank is served first.
    pub priorities: Vec<u32>,
    drr_cursor: usize,
    drr_topped_up: bool,
}

impl SchedulerState {
    pub fn new(kind: SchedulerKind, num_queues: usize) -> Self {
        SchedulerState {
            kind,
            rr_pointer: None,
            drr_deficits: vec![0; num_queues],
            drr_quantum: vec![DEFAULT_DRR_QUANTUM; num_queues],
            priorities: (0..num_queues as u32).collect(),
            drr_cursor: 0,
            drr_topped_up: false,
        }
    }

    pub fn with_priorities(mut self, ranks: Vec<u32>) -> Self {
        assert_eq!(ranks.len(), self.priorities.len());
        self.priorities = ranks;
        self
    }

    pub fn with_quanta(mut self, quanta: Vec<u64>) -> Self {
        assert_eq!(quanta.len(), self.drr_quantum.len());
        assert!(quanta.iter().all(|&q| q > 0), "DRR quantum must be positive");
        self.drr_quantum = quanta;
        self
    }

    fn drr_advance(&mut self, n: usize) {
        self.drr_cursor = (self.drr_cursor + 1) % n;
        self.drr_topped_up = false;
    }
}

/// Chooses the queue whose head packet the port transmits next.
pub fn pick_next(
    port: &PortSpec,
    sched: &mut SchedulerState,
    buf: &SharedBufferState,
) -> Option<QueueId> {
    let ids = &port.queue_ids;
    if ids.iter().all(|&q| buf.queue(q).is_empty()) {
        sched.drr_deficits.iter_mut().for_each(|d| *d = 0);
        return None;
    }
    let n = ids.len();
    match sched.kind {
        SchedulerKind::RoundRobin => {
            let start = sched.rr_pointer.map_or(0, |p| p + 1);
            let idx = (0..n)
                .map(|k| (start + k) % n)
                .find(|&i| !buf.queue(ids[i]).is_empty())?;
            sched.rr_pointer = Some(idx);
            Some(ids[idx])
        }
        SchedulerKind::StrictPriority => (0..n)
            .filter(|&i| !buf.queue(ids[i]).is_empty())
            .min_by_key(|&i| (sched.priorities[i], i))
            .map(|i| ids[i]),
        SchedulerKind::Drr => loop {
            let i = sched.drr_cursor;
            let queue = buf.queue(ids[i]);
            let Some(head) = queue.head() else {
                sched.drr_deficits[i] = 0;
                sched.drr_advance(n);
                continue;
            };
            if !sched.drr_topped_up {
                sched.drr_deficits[i] += sched.drr_quantum[i];
                sched.drr_topped_up = true;
            }
            let len = head.length_bytes as u64;
            if sched.drr_deficits[i] >= len {
                sched.drr_deficits[i] -= len;
                if queue.len_packets() == 1 {
                    sched.drr_deficits[i] = 0;
                    sched.drr_advance(n);
                }
                return Some(ids[i]);
            }
            sched.drr_advance(n);
        },
    }
}
