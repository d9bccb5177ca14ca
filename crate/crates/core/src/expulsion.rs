//! Head-drop expulsion of over-allocated queues.
//!
//! Each cell-slot the engine refreshes a bitmap of queues whose occupancy is
//! above their DT threshold, a round-robin arbiter picks one set bit, and a
//! fixed-priority arbiter lets that request through only when the output
//! scheduler is not fetching a packet in the same slot and the token bucket
//! holds enough redundant memory bandwidth to pay for the victim's cells.

use serde::Serialize;

use crate::admission::AdmissionPolicy;
use crate::error::ExpulsionError;
use crate::model::{PacketDescriptor, QueueId, SharedBufferState, SimTime};

/// One bit per queue; bit `i` set iff queue `i` was above its threshold at the last refresh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverAllocationBitmap {
    words: Vec<u64>,
    len: usize,
}

impl OverAllocationBitmap {
    pub fn new(len: usize) -> Self {
        OverAllocationBitmap {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_indices(len: usize, set: impl IntoIterator<Item = usize>) -> Self {
        let mut b = Self::new(len);
        for i in set {
            b.set(i, true);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < self.len, "bit {i} out of range");
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    /// First set bit at index `>= from`, without wrapping.
    fn next_from(&self, from: usize) -> Option<usize> {
        if from >= self.len {
            return None;
        }
        let mut w = from / 64;
        let mut word = self.words[w] & (!0u64 << (from % 64));
        loop {
            if word != 0 {
                let i = w * 64 + word.trailing_zeros() as usize;
                return (i < self.len).then_some(i);
            }
            w += 1;
            if w == self.words.len() {
                return None;
            }
            word = self.words[w];
        }
    }
}

impl std::fmt::Display for OverAllocationBitmap {
    /// Most significant (highest queue index) first, like a hardware register.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in (0..self.len).rev() {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Recomputes every bit from the live buffer state.
pub fn refresh_bitmap(buf: &SharedBufferState, policy: &AdmissionPolicy) -> OverAllocationBitmap {
    let mut bits = OverAllocationBitmap::new(buf.num_queues());
    refresh_bitmap_into(buf, policy, &mut bits);
    bits
}

pub fn refresh_bitmap_into(
    buf: &SharedBufferState,
    policy: &AdmissionPolicy,
    bits: &mut OverAllocationBitmap,
) {
    for q in buf.queues() {
        let over = q.occupancy_cells() as u64 > policy.threshold(buf, q.queue_id);
        bits.set(q.queue_id, over);
    }
}

pub fn is_over_allocated(buf: &SharedBufferState, policy: &AdmissionPolicy, q: QueueId) -> bool {
    buf.queue(q).occupancy_cells() as u64 > policy.threshold(buf, q)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundRobinPointer {
    pub last_granted: Option<usize>,
}

impl RoundRobinPointer {
    /// The index `rr_next` would grant, without moving the pointer.
    pub fn peek(&self, bitmap: &OverAllocationBitmap) -> Option<usize> {
        let start = self.last_granted.map_or(0, |l| l + 1);
        bitmap
            .next_from(start)
            .or_else(|| bitmap.next_from(0))
    }

    pub fn grant(&mut self, idx: usize) {
        self.last_granted = Some(idx);
    }
}

/// First set bit strictly after the last grant, cyclically; moves the pointer on a grant.
pub fn rr_next(bitmap: &OverAllocationBitmap, ptr: &mut RoundRobinPointer) -> Option<usize> {
    let idx = ptr.peek(bitmap)?;
    ptr.grant(idx);
    Some(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Requester {
    OutputScheduler,
    HeadDropSelector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArbiterRequest {
    pub source: Requester,
    pub queue_id: QueueId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grant {
    GrantScheduler,
    GrantHeadDrop,
    Idle,
}

/// Fixed priority: the output scheduler always wins; a head-drop goes through
/// only when the bucket already holds `cells_needed` tokens.
pub fn arbitrate(
    sched_req: Option<ArbiterRequest>,
    drop_req: Option<ArbiterRequest>,
    bucket: &TokenBucket,
    cells_needed: u32,
) -> Grant {
    if sched_req.is_some() {
        Grant::GrantScheduler
    } else if drop_req.is_some() && bucket.tokens >= cells_needed as i64 {
        Grant::GrantHeadDrop
    } else {
        Grant::Idle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Withdrawal {
    Tx,
    Expulsion,
}

/// Redundant memory bandwidth, one token per cell the fabric could read.
///
/// Transmission may drive the level negative; expulsion only spends tokens
/// that are actually there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBucket {
    pub tokens: i64,
    pub token_interval: SimTime,
    pub burst_cap: u64,
    pub last_refill: SimTime,
}

impl TokenBucket {
    pub fn new(token_interval: SimTime, burst_cap: u64) -> Self {
        assert!(token_interval.0 > 0, "token interval must be positive");
        TokenBucket {
            tokens: 0,
            token_interval,
            burst_cap,
            last_refill: SimTime::ZERO,
        }
    }

    /// Interval at which a fabric moving `aggregate_bps` reads one `cell_size_bytes` cell,
    /// rounded to the nearest nanosecond.
    pub fn interval_for(aggregate_bps: u64, cell_size_bytes: u32) -> SimTime {
        let num = cell_size_bytes as u128 * 8 * 1_000_000_000;
        let den = aggregate_bps as u128;
        SimTime(((num + den / 2) / den).max(1) as u64)
    }

    /// Adds one token per whole interval elapsed, clamped at the cap. Returns
    /// how many tokens were actually credited.
    pub fn refill(&mut self, now: SimTime) -> u64 {
        debug_assert!(now >= self.last_refill);
        let intervals = (now.0 - self.last_refill.0) / self.token_interval.0;
        self.last_refill = SimTime(self.last_refill.0 + intervals * self.token_interval.0);
        let room = (self.burst_cap as i64 - self.tokens).max(0) as u64;
        let credited = intervals.min(room);
        self.tokens += credited as i64;
        credited
    }

    pub fn withdraw(&mut self, cells: u32, source: Withdrawal) -> bool {
        debug_assert!(cells >= 1);
        match source {
            Withdrawal::Tx => {
                self.tokens -= cells as i64;
                true
            }
            Withdrawal::Expulsion if self.tokens >= cells as i64 => {
                self.tokens -= cells as i64;
                true
            }
            Withdrawal::Expulsion => false,
        }
    }
}

pub fn refill_tokens(bucket: &mut TokenBucket, now: SimTime) -> u64 {
    bucket.refill(now)
}

pub fn withdraw_tokens(bucket: &mut TokenBucket, cells: u32, source: Withdrawal) -> bool {
    bucket.withdraw(cells, source)
}

/// Removes the head packet of `q` without transmitting it.
pub fn head_drop(
    buf: &mut SharedBufferState,
    q: QueueId,
) -> Result<PacketDescriptor, ExpulsionError> {
    buf.remove_head_for_drop(q).ok_or(ExpulsionError::NoVictim(q))
}

/// Work done by the dequeue pipeline for one packet.
///
/// A transmission runs all five stages (read PD, unlink PD, then per cell:
/// read cell pointer, free cell, read cell data). A head-drop skips the
/// cell-data read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PipelineCost {
    pub pd_reads: u64,
    pub pd_dequeues: u64,
    pub cell_pointer_reads: u64,
    pub cell_frees: u64,
    pub cell_data_reads: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequeueAction {
    Transmit,
    HeadDrop,
}

impl PipelineCost {
    pub fn of(action: DequeueAction, cells: u32) -> Self {
        let c = cells as u64;
        PipelineCost {
            pd_reads: 1,
            pd_dequeues: 1,
            cell_pointer_reads: c,
            cell_frees: c,
            cell_data_reads: match action {
                DequeueAction::Transmit => c,
                DequeueAction::HeadDrop => 0,
            },
        }
    }

    /// How many of the five stage kinds this cost touches.
    pub fn stages_used(&self) -> usize {
        [
            self.pd_reads,
            self.pd_dequeues,
            self.cell_pointer_reads,
            self.cell_frees,
            self.cell_data_reads,
        ]
        .iter()
        .filter(|&&n| n > 0)
        .count()
    }

    pub fn add(&mut self, other: PipelineCost) {
        self.pd_reads += other.pd_reads;
        self.pd_dequeues += other.pd_dequeues;
        self.cell_pointer_reads += other.cell_pointer_reads;
        self.cell_frees += other.cell_frees;
        self.cell_data_reads += other.cell_data_reads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admission::{Alpha, PolicyKind};
    use crate::model::SimTime;

    fn pd(cells: u32) -> PacketDescriptor {
        PacketDescriptor {
            flow_id: 9,
            length_bytes: cells * 200,
            length_cells: cells,
            arrival_time: SimTime::ZERO,
            priority_class: 0,
            seq: 0,
        }
    }

    #[test]
    fn bitmap_marks_queues_over_threshold() {
        // lens 12, 5, 20 with free 10 and α = 1 → T = 10 for all.
        let mut buf = SharedBufferState::new(47, &[0, 0, 1]);
        for (q, n) in [(0, 12), (1, 5), (2, 20)] {
            for _ in 0..n {
                buf.enqueue(q, pd(1)).unwrap();
            }
        }
        let policy = AdmissionPolicy::uniform(PolicyKind::Occamy, Alpha::integer(1).unwrap(), 3);
        let bits = refresh_bitmap(&buf, &policy);
        assert_eq!(bits.ones().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(bits.to_string(), "101");

        // q0 head-dropped down to 9 cells: bit clears (free rises to 13, T = 13).
        for _ in 0..3 {
            head_drop(&mut buf, 0).unwrap();
        }
        let bits = refresh_bitmap(&buf, &policy);
        assert!(!bits.get(0));
    }

    #[test]
    fn bitmap_empty_when_all_below() {
        let buf = SharedBufferState::new(100, &[0, 0]);
        let policy = AdmissionPolicy::uniform(PolicyKind::Occamy, Alpha::integer(1).unwrap(), 2);
        assert!(refresh_bitmap(&buf, &policy).is_empty());
    }

    #[test]
    fn paper_bitmap_register_pattern() {
        let b = OverAllocationBitmap::from_indices(8, [0, 2]);
        assert_eq!(b.to_string(), "00000101");
    }

    #[test]
    fn rr_alternates_and_wraps() {
        let bits = OverAllocationBitmap::from_indices(8, [1, 3]);
        let mut ptr = RoundRobinPointer {
            last_granted: Some(1),
        };
        assert_eq!(rr_next(&bits, &mut ptr), Some(3));
        assert_eq!(rr_next(&bits, &mut ptr), Some(1));
        assert_eq!(rr_next(&bits, &mut ptr), Some(3));

        let single = OverAllocationBitmap::from_indices(8, [5]);
        for last in [None, Some(0), Some(5), Some(7)] {
            let mut p = RoundRobinPointer { last_granted: last };
            assert_eq!(rr_next(&single, &mut p), Some(5));
            assert_eq!(rr_next(&single, &mut p), Some(5));
        }

        let mut p = RoundRobinPointer::default();
        assert_eq!(rr_next(&OverAllocationBitmap::new(8), &mut p), None);
        assert_eq!(p.last_granted, None);
    }

    #[test]
    fn rr_crosses_word_boundaries() {
        let bits = OverAllocationBitmap::from_indices(130, [3, 64, 129]);
        let mut p = RoundRobinPointer::default();
        let got: Vec<_> = (0..6).map(|_| rr_next(&bits, &mut p).unwrap()).collect();
        assert_eq!(got, vec![3, 64, 129, 3, 64, 129]);
    }

    #[test]
    fn arbiter_priorities() {
        let mut bucket = TokenBucket::new(SimTime(20), 16);
        bucket.tokens = 10;
        let s = Some(ArbiterRequest {
            source: Requester::OutputScheduler,
            queue_id: 0,
        });
        let d = Some(ArbiterRequest {
            source: Requester::HeadDropSelector,
            queue_id: 1,
        });
        assert_eq!(arbitrate(s, d, &bucket, 2), Grant::GrantScheduler);
        bucket.tokens = 5;
        assert_eq!(arbitrate(None, d, &bucket, 2), Grant::GrantHeadDrop);
        bucket.tokens = 1;
        assert_eq!(arbitrate(None, d, &bucket, 2), Grant::Idle);
        bucket.tokens = -4;
        assert_eq!(arbitrate(s, None, &bucket, 2), Grant::GrantScheduler);
        assert_eq!(arbitrate(None, None, &bucket, 2), Grant::Idle);
    }

    #[test]
    fn token_interval_for_eight_10g_ports() {
        assert_eq!(TokenBucket::interval_for(80_000_000_000, 200), SimTime(20));
    }

    #[test]
    fn refill_and_cap() {
        let mut b = TokenBucket::new(SimTime(20), 100);
        assert_eq!(refill_tokens(&mut b, SimTime(100)), 5);
        assert_eq!(b.tokens, 5);
        // partial interval carries over
        refill_tokens(&mut b, SimTime(139));
        assert_eq!(b.tokens, 6);
        assert_eq!(b.last_refill, SimTime(120));
        refill_tokens(&mut b, SimTime(140));
        assert_eq!(b.tokens, 7);

        let mut capped = TokenBucket::new(SimTime(20), 4);
        capped.tokens = 4;
        refill_tokens(&mut capped, SimTime(1000));
        assert_eq!(capped.tokens, 4);
    }

    #[test]
    fn withdrawals() {
        let mut b = TokenBucket::new(SimTime(20), 8);
        b.tokens = 1;
        assert!(withdraw_tokens(&mut b, 3, Withdrawal::Tx));
        assert_eq!(b.tokens, -2);

        b.tokens = 2;
        assert!(withdraw_tokens(&mut b, 2, Withdrawal::Expulsion));
        assert_eq!(b.tokens, 0);

        b.tokens = 1;
        assert!(!withdraw_tokens(&mut b, 2, Withdrawal::Expulsion));
        assert_eq!(b.tokens, 1);

        // refill from a negative level still counts every interval
        b.tokens = -3;
        b.refill(SimTime(b.last_refill.0 + 40));
        assert_eq!(b.tokens, -1);
    }

    #[test]
    fn head_drop_removes_fifo_head() {
        let mut buf = SharedBufferState::new(10, &[0]);
        let mut a = pd(2);
        a.seq = 1;
        let mut b = pd(1);
        b.seq = 2;
        buf.enqueue(0, a).unwrap();
        buf.enqueue(0, b).unwrap();
        let dropped = head_drop(&mut buf, 0).unwrap();
        assert_eq!(dropped.seq, 1);
        assert_eq!(buf.queue(0).head().unwrap().seq, 2);
        assert_eq!(buf.free_cells(), 9);
        assert_eq!(buf.queue(0).stats.head_dropped, 1);
        head_drop(&mut buf, 0).unwrap();
        assert_eq!(head_drop(&mut buf, 0), Err(ExpulsionError::NoVictim(0)));
        buf.check_conservation().unwrap();
    }

    #[test]
    fn head_drop_skips_cell_data_read() {
        let tx = PipelineCost::of(DequeueAction::Transmit, 3);
        let hd = PipelineCost::of(DequeueAction::HeadDrop, 3);
        assert_eq!(tx.stages_used(), 5);
        assert_eq!(hd.stages_used(), 4);
        assert_eq!(hd.cell_data_reads, 0);
        assert_eq!(hd.cell_frees, 3);
    }
}
