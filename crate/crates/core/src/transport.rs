//! Sources that feed packets into the switch.
//!
//! Finite flows run a fixed-window go-back-N sender with a fixed RTO and no
//! congestion control. Long-lived and raw-burst traffic is open loop: packets
//! are paced out at a configured rate and losses are never repaired.

use std::ops::Range;

use crate::model::{serialization_time, FlowId, SimTime};

pub const DEFAULT_RTO: SimTime = SimTime(5_000_000);
pub const DEFAULT_WINDOW_BYTES: u64 = 64 * 1024;

/// One packet handed to the switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emission {
    pub time: SimTime,
    pub bytes: u32,
    pub seq: u32,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub flow_id: FlowId,
    pub total_bytes: u64,
    pub sent_bytes: u64,
    pub acked_bytes: u64,
    pub window_packets: u32,
    pub rto: SimTime,
    pub start_time: SimTime,
    pub finish_time: Option<SimTime>,
    pub retransmissions: u64,
    mss: u32,
    packets: u32,
    /// Next sequence number the receiver expects (cumulative ACK).
    base: u32,
    next_seq: u32,
    next_send: SimTime,
    rate_bps: u64,
    rto_deadline: Option<SimTime>,
}

impl FlowState {
    pub fn new(
        flow_id: FlowId,
        total_bytes: u64,
        mss: u32,
        window_packets: u32,
        rto: SimTime,
        rate_bps: u64,
        start_time: SimTime,
    ) -> Self {
        assert!(total_bytes > 0 && mss > 0 && window_packets > 0 && rate_bps > 0);
        FlowState {
            flow_id,
            total_bytes,
            sent_bytes: 0,
            acked_bytes: 0,
            window_packets,
            rto,
            start_time,
            finish_time: None,
            retransmissions: 0,
            mss,
            packets: total_bytes.div_ceil(mss as u64) as u32,
            base: 0,
            next_seq: 0,
            next_send: start_time,
            rate_bps,
            rto_deadline: None,
        }
    }

    pub fn packet_len(&self, seq: u32) -> u32 {
        let off = seq as u64 * self.mss as u64;
        (self.total_bytes - off).min(self.mss as u64) as u32
    }

    pub fn num_packets(&self) -> u32 {
        self.packets
    }

    pub fn outstanding(&self) -> Range<u32> {
        self.base..self.next_seq
    }

    pub fn is_finished(&self) -> bool {
        self.finish_time.is_some()
    }

    pub fn rto_deadline(&self) -> Option<SimTime> {
        self.rto_deadline
    }

    fn can_send(&self) -> bool {
        !self.is_finished()
            && self.next_seq < self.packets
            && self.next_seq < self.base + self.window_packets
    }

    /// Earliest time this flow needs attention.
    pub fn next_wake(&self) -> Option<SimTime> {
        if self.is_finished() {
            return None;
        }
        let send = self.can_send().then_some(self.next_send);
        match (send, self.rto_deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Emits every packet whose send time falls before `until`, firing the
    /// retransmission timer first if it expires earlier.
    pub fn poll(&mut self, until: SimTime, out: &mut Vec<Emission>) {
        loop {
            let send = self
                .can_send()
                .then_some(self.next_send)
                .filter(|&t| t < until);
            let timeout = self.rto_deadline.filter(|&t| t < until);
            match (send, timeout) {
                (_, Some(d)) if send.is_none_or(|s| d <= s) => self.fire_timeout(d),
                (Some(t), _) => self.send_one(t, out),
                _ => return,
            }
        }
    }

    fn send_one(&mut self, t: SimTime, out: &mut Vec<Emission>) {
        let seq = self.next_seq;
        let bytes = self.packet_len(seq);
        out.push(Emission {
            time: t,
            bytes,
            seq,
        });
        if self.rto_deadline.is_none() {
            self.rto_deadline = Some(t + self.rto);
        }
        self.sent_bytes += bytes as u64;
        self.next_seq += 1;
        self.next_send = t + serialization_time(bytes as u64, self.rate_bps);
    }

    fn fire_timeout(&mut self, deadline: SimTime) {
        self.rto_deadline = None;
        if self.base < self.next_seq {
            self.retransmissions += (self.next_seq - self.base) as u64;
            self.next_seq = self.base;
            self.next_send = self.next_send.max(deadline);
        }
    }

    /// Packet `seq` left the switch at `delivered_at`; the sender learns of it at `now`.
    ///
    /// The receiver only accepts the next in-order packet; anything else is discarded.
    pub fn on_delivered(&mut self, seq: u32, delivered_at: SimTime, now: SimTime) {
        if self.is_finished() || seq != self.base {
            return;
        }
        self.base += 1;
        self.acked_bytes += self.packet_len(seq) as u64;
        self.next_send = self.next_send.max(now);
        if self.next_seq < self.base {
            self.next_seq = self.base;
        }
        if self.base == self.packets {
            self.finish_time = Some(delivered_at);
            self.rto_deadline = None;
        } else if self.base < self.next_seq {
            self.rto_deadline = Some(now + self.rto);
        } else {
            self.rto_deadline = None;
        }
    }

    /// The switch dropped packet `seq` at `now`. Re-arms the timer when the
    /// lost packet is the oldest outstanding one, so it is resent at `now + rto`.
    pub fn on_lost(&mut self, seq: u32, now: SimTime) {
        if !self.is_finished() && seq == self.base && self.base < self.next_seq {
            self.rto_deadline = Some(now + self.rto);
        }
    }
}

/// Open-loop paced source. `rate_bps = None` emits everything at once.
#[derive(Debug, Clone)]
pub struct PacedSource {
    pub flow_id: FlowId,
    pub packet_bytes: u32,
    pub rate_bps: Option<u64>,
    pub stop: Option<SimTime>,
    remaining: Option<u64>,
    next_time: SimTime,
    seq: u32,
}

impl PacedSource {
    pub fn new(
        flow_id: FlowId,
        packet_bytes: u32,
        rate_bps: Option<u64>,
        start: SimTime,
        stop: Option<SimTime>,
        total_bytes: Option<u64>,
    ) -> Self {
        assert!(packet_bytes > 0);
        PacedSource {
            flow_id,
            packet_bytes,
            rate_bps,
            stop,
            remaining: total_bytes,
            next_time: start,
            seq: 0,
        }
    }

    fn active(&self) -> bool {
        self.remaining != Some(0) && self.stop.is_none_or(|s| self.next_time < s)
    }

    pub fn next_wake(&self) -> Option<SimTime> {
        self.active().then_some(self.next_time)
    }

    pub fn emitted(&self) -> u32 {
        self.seq
    }

    pub fn poll(&mut self, until: SimTime, out: &mut Vec<Emission>) {
        while self.active() && self.next_time < until {
            let bytes = match self.remaining {
                Some(r) => r.min(self.packet_bytes as u64) as u32,
                None => self.packet_bytes,
            };
            out.push(Emission {
                time: self.next_time,
                bytes,
                seq: self.seq,
            });
            self.seq += 1;
            if let Some(r) = self.remaining.as_mut() {
                *r -= bytes as u64;
            }
            if let Some(rate) = self.rate_bps {
                self.next_time = self.next_time + serialization_time(bytes as u64, rate);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    Flow(FlowState),
    Paced(PacedSource),
}

impl Source {
    pub fn flow_id(&self) -> FlowId {
        match self {
            Source::Flow(f) => f.flow_id,
            Source::Paced(p) => p.flow_id,
        }
    }

    pub fn next_wake(&self) -> Option<SimTime> {
        match self {
            Source::Flow(f) => f.next_wake(),
            Source::Paced(p) => p.next_wake(),
        }
    }

    pub fn poll(&mut self, until: SimTime, out: &mut Vec<Emission>) {
        match self {
            Source::Flow(f) => f.poll(until, out),
            Source::Paced(p) => p.poll(until, out),
        }
    }
}

/// Advances a flow to `now` and returns the packets it injects.
pub fn drive_transport(flow: &mut FlowState, now: SimTime) -> Vec<Emission> {
    let mut out = Vec::new();
    flow.poll(SimTime(now.0 + 1), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const G10: u64 = 10_000_000_000;

    fn flow(bytes: u64, window: u32) -> FlowState {
        // 1500B at 10G is 1200ns
        FlowState::new(1, bytes, 1500, window, DEFAULT_RTO, G10, SimTime::ZERO)
    }

    #[test]
    fn fills_window_then_waits() {
        let mut f = flow(100 * 1500, 4);
        let out = drive_transport(&mut f, SimTime(1_000_000));
        assert_eq!(out.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(out[1].time, SimTime(1200));
        assert_eq!(f.outstanding(), 0..4);
        assert!(drive_transport(&mut f, SimTime(1_000_000)).is_empty());
    }

    #[test]
    fn window_slides_on_delivery() {
        let mut f = flow(100 * 1500, 4);
        drive_transport(&mut f, SimTime(10_000));
        for s in 0..4 {
            f.on_delivered(s, SimTime(20_000), SimTime(20_000));
        }
        assert_eq!(f.acked_bytes, 6000);
        let out = drive_transport(&mut f, SimTime(30_000));
        assert_eq!(out.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        // a window-blocked sender resumes when the ack arrives
        assert_eq!(out[0].time, SimTime(20_000));
        assert_eq!(out[1].time, SimTime(21_200));
    }

    #[test]
    fn lost_packet_resent_after_rto() {
        let mut f = flow(20 * 1500, 8);
        drive_transport(&mut f, SimTime(20_000)); // seq 0..8 out
        for s in 0..7 {
            f.on_delivered(s, SimTime(20_000), SimTime(20_000));
        }
        // seq 7 is now the oldest outstanding; the switch head-drops it
        let drop_time = SimTime(25_000);
        f.on_lost(7, drop_time);
        let before: Vec<_> = drive_transport(&mut f, SimTime(100_000));
        // window refilled with 8..14 meanwhile
        assert!(before.iter().all(|e| e.seq >= 8));
        // deliveries of later packets are out of order and discarded
        for e in &before {
            f.on_delivered(e.seq, SimTime(30_000), SimTime(30_000));
        }
        assert_eq!(f.outstanding().start, 7);
        let deadline = drop_time + DEFAULT_RTO;
        assert_eq!(f.rto_deadline(), Some(deadline));
        assert!(drive_transport(&mut f, SimTime(deadline.0 - 1)).is_empty());
        let resent = drive_transport(&mut f, deadline);
        assert_eq!(resent[0].seq, 7);
        assert_eq!(resent[0].time, deadline);
        assert!(f.retransmissions > 0);
    }

    #[test]
    fn completes_when_all_acked() {
        let mut f = FlowState::new(3, 3200, 1500, 4, DEFAULT_RTO, G10, SimTime(100));
        let out = drive_transport(&mut f, SimTime(1_000_000));
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].bytes, 200);
        for e in out {
            f.on_delivered(e.seq, SimTime(9_000), SimTime(9_000));
        }
        assert_eq!(f.finish_time, Some(SimTime(9_000)));
        assert_eq!(f.acked_bytes, 3200);
        assert_eq!(f.next_wake(), None);
    }

    #[test]
    fn timeout_without_loss_notice_uses_send_time() {
        let mut f = flow(1500, 4);
        let out = drive_transport(&mut f, SimTime(10));
        assert_eq!(out.len(), 1);
        assert_eq!(f.rto_deadline(), Some(DEFAULT_RTO));
        let again = drive_transport(&mut f, DEFAULT_RTO);
        assert_eq!(again.len(), 1);
        assert_eq!(again[0].time, DEFAULT_RTO);
    }

    #[test]
    fn paced_source_rate_and_total() {
        let mut p = PacedSource::new(5, 1500, Some(G10), SimTime(0), None, Some(4000));
        let mut out = Vec::new();
        p.poll(SimTime(1_000_000), &mut out);
        assert_eq!(out.iter().map(|e| e.bytes).collect::<Vec<_>>(), vec![1500, 1500, 1000]);
        assert_eq!(out[2].time, SimTime(2400));
        assert_eq!(p.next_wake(), None);

        let mut burst = PacedSource::new(6, 1000, None, SimTime(50), None, Some(5000));
        let mut out = Vec::new();
        burst.poll(SimTime(51), &mut out);
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|e| e.time == SimTime(50)));

        let mut endless = PacedSource::new(7, 1500, Some(G10), SimTime(0), Some(SimTime(2400)), None);
        let mut out = Vec::new();
        endless.poll(SimTime(1_000_000), &mut out);
        assert_eq!(out.len(), 2);
    }
}
