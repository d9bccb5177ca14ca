//! Admission control: static threshold, dynamic threshold (DT), the
//! preemptive DT variant, and Pushout, plus the closed-form steady-state
//! relations of DT.
//!
//! DT caps every queue at `T(t) = α · free(t)`. A packet is admitted only
//! while its queue is strictly below that cap and its cells fit in the free
//! list. The preemptive policy admits exactly like DT; it differs only in what
//! the engine does afterwards (head-drop of over-allocated queues).

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::AnalysisError;
use crate::model::{PacketDescriptor, QueueId, SharedBufferState};

/// The DT proportionality parameter, kept as an exact positive rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Alpha(Ratio<u64>);

impl Alpha {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (num > 0 && den > 0).then(|| Alpha(Ratio::new(num, den)))
    }

    pub fn integer(n: u64) -> Option<Self> {
        Alpha::new(n, 1)
    }

    pub fn from_f64(x: f64) -> Option<Self> {
        if !(x.is_finite() && x > 0.0) {
            return None;
        }
        let r = Ratio::<i64>::approximate_float(x)?;
        Alpha::new(*r.numer() as u64, *r.denom() as u64)
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    /// `floor(α · cells)`.
    pub fn scale_floor(&self, cells: u32) -> u64 {
        (cells as u128 * self.numer() as u128 / self.denom() as u128) as u64
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl FromStr for Alpha {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parsed = match s.split_once('/') {
            Some((n, d)) => match (n.trim().parse::<u64>(), d.trim().parse::<u64>()) {
                (Ok(n), Ok(d)) => Alpha::new(n, d),
                _ => None,
            },
            None => s.parse::<f64>().ok().and_then(Alpha::from_f64),
        };
        parsed.ok_or_else(|| format!("alpha must be a positive number or ratio, got {s:?}"))
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Float(f64),
            Text(String),
        }
        let alpha = match Raw::deserialize(d)? {
            Raw::Int(n) => Alpha::integer(n),
            Raw::Float(x) => Alpha::from_f64(x),
            Raw::Text(t) => t.parse().ok(),
        };
        alpha.ok_or_else(|| serde::de::Error::custom("alpha must be positive"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "static")]
    StaticThreshold,
    #[serde(alias = "dt")]
    DynamicThreshold,
    Occamy,
    Pushout,
}

impl PolicyKind {
    pub fn short_name(self) -> &'static str {
        match self {
            PolicyKind::StaticThreshold => "static",
            PolicyKind::DynamicThreshold => "dt",
            PolicyKind::Occamy => "occamy",
            PolicyKind::Pushout => "pushout",
        }
    }

    /// Default α: 1 for DT, 8 for the preemptive policy.
    pub fn default_alpha(self) -> Alpha {
        match self {
            PolicyKind::Occamy => Alpha::integer(8).unwrap(),
            _ => Alpha::integer(1).unwrap(),
        }
    }

    pub fn uses_threshold(self) -> bool {
        matches!(self, PolicyKind::DynamicThreshold | PolicyKind::Occamy)
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "static" | "static_threshold" | "st" => Ok(PolicyKind::StaticThreshold),
            "dt" | "dynamic_threshold" => Ok(PolicyKind::DynamicThreshold),
            "occamy" | "preemptive" => Ok(PolicyKind::Occamy),
            "pushout" | "po" => Ok(PolicyKind::Pushout),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissionPolicy {
    pub kind: PolicyKind,
    /// Indexed by queue id.
    pub per_queue_alpha: Vec<Alpha>,
    pub static_limit_cells: Option<u32>,
}

impl AdmissionPolicy {
    pub fn uniform(kind: PolicyKind, alpha: Alpha, num_queues: usize) -> Self {
        AdmissionPolicy {
            kind,
            per_queue_alpha: vec![alpha; num_queues],
            static_limit_cells: None,
        }
    }

    pub fn alpha(&self, q: QueueId) -> Alpha {
        self.per_queue_alpha[q]
    }

    pub fn threshold(&self, buf: &SharedBufferState, q: QueueId) -> u64 {
        dt_threshold(buf, self.per_queue_alpha[q])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Decision {
    Accept,
    TailDrop,
    AcceptAfterPushout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmissionVerdict {
    pub decision: Decision,
    /// The limit the decision was compared against: `T(t)` for DT, the static
    /// cap, or the free-cell count for Pushout.
    pub threshold_at_decision: u64,
    pub pushout_victim: Option<QueueId>,
}

impl AdmissionVerdict {
    fn plain(admitted: bool, threshold: u64) -> Self {
        AdmissionVerdict {
            decision: if admitted {
                Decision::Accept
            } else {
                Decision::TailDrop
            },
            threshold_at_decision: threshold,
            pushout_victim: None,
        }
    }
}

/// `T(t) = floor(α · free_cells)`.
pub fn dt_threshold(buf: &SharedBufferState, alpha: Alpha) -> u64 {
    alpha.scale_floor(buf.free_cells())
}

pub fn admit(
    policy: &AdmissionPolicy,
    q: QueueId,
    pd: &PacketDescriptor,
    buf: &SharedBufferState,
) -> AdmissionVerdict {
    let free = buf.free_cells();
    let occ = buf.queue(q).occupancy_cells();
    let fits = free >= pd.length_cells;
    match policy.kind {
        PolicyKind::StaticThreshold => {
            let limit = policy.static_limit_cells.unwrap_or(buf.capacity_cells());
            let under = occ as u64 + pd.length_cells as u64 <= limit as u64;
            AdmissionVerdict::plain(under && fits, limit as u64)
        }
        PolicyKind::DynamicThreshold | PolicyKind::Occamy => {
            let t = policy.threshold(buf, q);
            AdmissionVerdict::plain((occ as u64) < t && fits, t)
        }
        PolicyKind::Pushout => {
            if fits {
                return AdmissionVerdict::plain(true, free as u64);
            }
            match pushout_victim(buf, q) {
                Some(v) => AdmissionVerdict {
                    decision: Decision::AcceptAfterPushout,
                    threshold_at_decision: free as u64,
                    pushout_victim: Some(v),
                },
                None => AdmissionVerdict::plain(false, free as u64),
            }
        }
    }
}

/// The queue Pushout expels from to make room for an arrival at `arriving`.
///
/// `None` when the arriving queue is the unique longest, or nothing else holds cells.
pub fn pushout_victim(buf: &SharedBufferState, arriving: QueueId) -> Option<QueueId> {
    let own = buf.queue(arriving).occupancy_cells();
    let other = buf
        .queues()
        .iter()
        .filter(|q| q.queue_id != arriving && q.occupancy_cells() > 0)
        .fold(None::<(QueueId, u32)>, |best, q| match best {
            Some((_, occ)) if occ >= q.occupancy_cells() => best,
            _ => Some((q.queue_id, q.occupancy_cells())),
        })?;
    (other.1 >= own).then_some(other.0)
}

/// Full scan for the queue with the most cells; ties go to the lowest id.
pub fn longest_queue(buf: &SharedBufferState) -> Option<QueueId> {
    let mut best: Option<(QueueId, u32)> = None;
    for q in buf.queues() {
        let occ = q.occupancy_cells();
        if occ == 0 {
            continue;
        }
        if best.is_none_or(|(_, b)| occ > b) {
            best = Some((q.queue_id, occ));
        }
    }
    best.map(|(q, _)| q)
}

/// Steady-state free buffer `F = B / (1 + α·N)` with `N` congested queues.
pub fn reserved_free_buffer(b: f64, alpha: f64, n: u32) -> Result<f64, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::NoCongestedQueues);
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(AnalysisError::InvalidArgument("alpha must be positive"));
    }
    Ok(b / (1.0 + alpha * n as f64))
}

/// Combined buffer share held by `N` congested queues at steady state,
/// `α·N / (1 + α·N)`; each queue holds `1/N` of it.
pub fn max_steady_queue_share(alpha: f64, n: u32) -> Result<f64, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::NoCongestedQueues);
    }
    let an = alpha * n as f64;
    Ok(an / (1.0 + an))
}

/// Extra buffer utilization gained by raising α from `from` to `to` with one congested queue.
pub fn utilization_gain(from: f64, to: f64) -> f64 {
    let share = |a: f64| a / (1.0 + a);
    share(to) - share(from)
}

/// Whether bursts at rate `R` into `M` queues get their fair buffer while
/// `N` over-allocated queues drain at rate `V`:
/// `R ≤ V · (1 + (1 + α·N) / (α·M))`.
///
/// # Panics
/// If `m == 0` or `v <= 0`.
pub fn fairness_condition_holds(r: f64, v: f64, m: u32, n: u32, alpha: f64) -> bool {
    assert!(m >= 1 && v > 0.0, "need M >= 1 and V > 0");
    let (m, n) = (m as f64, n as f64);
    r <= v * (1.0 + (1.0 + alpha * n) / (alpha * m))
}

/// The same condition in the rearranged form `1/α ≥ (R/V − 1)·M − N`.
pub fn fairness_condition_rearranged(r: f64, v: f64, m: u32, n: u32, alpha: f64) -> bool {
    assert!(m >= 1 && v > 0.0, "need M >= 1 and V > 0");
    1.0 / alpha >= (r / v - 1.0) * m as f64 - n as f64
}

/// The condition as `α → ∞`: `R ≤ V · (1 + N/M)`.
pub fn fairness_condition_unbounded_alpha(r: f64, v: f64, m: u32, n: u32) -> bool {
    assert!(m >= 1 && v > 0.0, "need M >= 1 and V > 0");
    r <= v * (1.0 + n as f64 / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PacketDescriptor, SimTime};

    fn pd(cells: u32) -> PacketDescriptor {
        PacketDescriptor {
            flow_id: 0,
            length_bytes: cells * 200,
            length_cells: cells,
            arrival_time: SimTime::ZERO,
            priority_class: 0,
            seq: 0,
        }
    }

    /// Buffer whose queues hold the given cell counts, as 1-cell packets.
    fn filled(capacity: u32, lens: &[u32]) -> SharedBufferState {
        let ports = vec![0; lens.len()];
        let mut buf = SharedBufferState::new(capacity, &ports);
        for (q, &n) in lens.iter().enumerate() {
            for _ in 0..n {
                buf.enqueue(q, pd(1)).unwrap();
            }
        }
        buf
    }

    fn a(x: f64) -> Alpha {
        Alpha::from_f64(x).unwrap()
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!("0.5".parse::<Alpha>().unwrap(), Alpha::new(1, 2).unwrap());
        assert_eq!("1/2".parse::<Alpha>().unwrap(), Alpha::new(1, 2).unwrap());
        assert_eq!("8".parse::<Alpha>().unwrap().to_string(), "8");
        assert!("0".parse::<Alpha>().is_err());
        assert!("-1".parse::<Alpha>().is_err());
        assert!(Alpha::new(0, 1).is_none());
    }

    #[test]
    fn threshold_examples() {
        let buf = filled(100, &[40]);
        assert_eq!(dt_threshold(&buf, a(2.0)), 120);
        assert_eq!(dt_threshold(&buf, a(0.5)), 30);
        let full = filled(10, &[10]);
        assert_eq!(dt_threshold(&full, a(4.0)), 0);
        // floor on odd free counts
        let buf = filled(7, &[0]);
        assert_eq!(dt_threshold(&buf, a(0.5)), 3);
    }

    #[test]
    fn dt_admission_and_tie_break() {
        let policy = AdmissionPolicy::uniform(PolicyKind::DynamicThreshold, a(1.0), 2);
        // q0 = 5, free = 10 → T = 10
        let buf = filled(20, &[5, 5]);
        let v = admit(&policy, 0, &pd(1), &buf);
        assert_eq!(v.decision, Decision::Accept);
        assert_eq!(v.threshold_at_decision, 10);
        // q0 = 10, free = 10 → T = 10, q ≥ T rejects
        let buf = filled(20, &[10, 0]);
        assert_eq!(admit(&policy, 0, &pd(1), &buf).decision, Decision::TailDrop);
        // below threshold but the packet does not fit
        let buf = filled(20, &[0, 18]);
        let policy = AdmissionPolicy::uniform(PolicyKind::DynamicThreshold, a(8.0), 2);
        assert_eq!(admit(&policy, 0, &pd(3), &buf).decision, Decision::TailDrop);
    }

    #[test]
    fn occamy_admits_like_dt() {
        let dt = AdmissionPolicy::uniform(PolicyKind::DynamicThreshold, a(4.0), 3);
        let oc = AdmissionPolicy::uniform(PolicyKind::Occamy, a(4.0), 3);
        for lens in [[0, 0, 0], [30, 2, 0], [50, 40, 9], [12, 12, 12]] {
            let buf = filled(100, &lens);
            for q in 0..3 {
                assert_eq!(
                    admit(&dt, q, &pd(2), &buf).decision,
                    admit(&oc, q, &pd(2), &buf).decision
                );
            }
        }
    }

    #[test]
    fn static_threshold_cap() {
        let mut policy = AdmissionPolicy::uniform(PolicyKind::StaticThreshold, a(1.0), 2);
        policy.static_limit_cells = Some(10);
        let buf = filled(100, &[8, 0]);
        assert_eq!(admit(&policy, 0, &pd(2), &buf).decision, Decision::Accept);
        assert_eq!(admit(&policy, 0, &pd(3), &buf).decision, Decision::TailDrop);
        let buf = filled(10, &[0, 9]);
        assert_eq!(admit(&policy, 0, &pd(2), &buf).decision, Decision::TailDrop);
    }

    #[test]
    fn pushout_picks_longest() {
        let policy = AdmissionPolicy::uniform(PolicyKind::Pushout, a(1.0), 3);
        let buf = filled(11, &[2, 9, 0]);
        let v = admit(&policy, 0, &pd(1), &buf);
        assert_eq!(v.decision, Decision::AcceptAfterPushout);
        assert_eq!(v.pushout_victim, Some(1));
        // free space: plain accept
        let buf = filled(12, &[2, 9, 0]);
        assert_eq!(admit(&policy, 2, &pd(1), &buf).decision, Decision::Accept);
        // arriving queue is the unique longest
        assert_eq!(admit(&policy, 1, &pd(1), &filled(11, &[2, 9, 0])).decision, Decision::TailDrop);
        // tied for longest: expel from the other one
        let buf = filled(10, &[5, 5, 0]);
        assert_eq!(pushout_victim(&buf, 0), Some(1));
        assert_eq!(pushout_victim(&buf, 1), Some(0));
    }

    #[test]
    fn longest_queue_examples() {
        // 80KB vs 60KB, in 200B cells
        let mut buf = filled(1000, &[400, 300]);
        assert_eq!(longest_queue(&buf), Some(0));
        for _ in 0..150 {
            buf.dequeue_head(0).unwrap();
        }
        assert_eq!(longest_queue(&buf), Some(1));
        assert_eq!(longest_queue(&filled(20, &[5, 5])), Some(0));
        assert_eq!(longest_queue(&filled(20, &[0, 0])), None);
    }

    #[test]
    fn reserved_free_buffer_values() {
        assert!((reserved_free_buffer(900.0, 8.0, 1).unwrap() - 100.0).abs() < 1e-12);
        assert!((reserved_free_buffer(900.0, 16.0, 1).unwrap() - 900.0 / 17.0).abs() < 1e-12);
        assert!((reserved_free_buffer(900.0, 1.0, 1).unwrap() - 450.0).abs() < 1e-12);
        assert_eq!(
            reserved_free_buffer(900.0, 1.0, 0),
            Err(AnalysisError::NoCongestedQueues)
        );
    }

    #[test]
    fn steady_share_values() {
        assert!((max_steady_queue_share(8.0, 1).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!((max_steady_queue_share(1.0, 1).unwrap() - 0.5).abs() < 1e-12);
        let gain = utilization_gain(8.0, 16.0);
        assert!((gain - 0.052).abs() < 0.001, "gain {gain}");
    }

    #[test]
    fn fairness_condition_examples() {
        for alpha in [0.5, 1.0, 8.0, 1e6] {
            assert!(fairness_condition_holds(2.0, 1.0, 1, 1, alpha));
            assert!(fairness_condition_holds(5.0, 5.0, 3, 0, alpha));
        }
        assert!(fairness_condition_unbounded_alpha(2.0, 1.0, 1, 1));
        assert!(!fairness_condition_unbounded_alpha(2.01, 1.0, 1, 1));
        // α = 2: holds up to R = 2.5 V
        assert!(fairness_condition_holds(2.5, 1.0, 1, 1, 2.0));
        assert!(!fairness_condition_holds(3.0, 1.0, 1, 1, 2.0));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::model::{PacketDescriptor, SimTime};
    use proptest::prelude::*;

    fn buf_from(lens: &[u32], extra_free: u32) -> SharedBufferState {
        let total: u32 = lens.iter().sum();
        let ports = vec![0; lens.len()];
        let mut buf = SharedBufferState::new(total + extra_free, &ports);
        for (q, &n) in lens.iter().enumerate() {
            for _ in 0..n {
                buf.enqueue(
                    q,
                    PacketDescriptor {
                        flow_id: 0,
                        length_bytes: 200,
                        length_cells: 1,
                        arrival_time: SimTime::ZERO,
                        priority_class: 0,
                        seq: 0,
                    },
                )
                .unwrap();
            }
        }
        buf
    }

    proptest! {
        #[test]
        fn rearranged_condition_agrees(r in 0.01f64..10.0, v in 0.01f64..10.0,
                                       m in 1u32..8, n in 0u32..8, alpha in 0.05f64..64.0) {
            let lhs = fairness_condition_holds(r, v, m, n, alpha);
            let rhs = fairness_condition_rearranged(r, v, m, n, alpha);
            // the two forms only disagree within rounding of the boundary
            let margin = (r / v - 1.0) * m as f64 - n as f64 - 1.0 / alpha;
            prop_assume!(margin.abs() > 1e-9);
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn threshold_monotone_in_occupancy(lens in proptest::collection::vec(0u32..40, 1..5),
                                           extra in 0u32..50, num in 1u64..20, den in 1u64..4) {
            let alpha = Alpha::new(num, den).unwrap();
            let buf = buf_from(&lens, extra);
            let t = dt_threshold(&buf, alpha);
            prop_assert_eq!(t, buf.free_cells() as u64 * num / den);
            let mut more = lens.clone();
            more[0] += 1;
            let fuller = buf_from(&more, extra.saturating_sub(1));
            if extra > 0 {
                prop_assert!(dt_threshold(&fuller, alpha) <= t);
            }
        }

        #[test]
        fn pushout_never_drops_when_space(lens in proptest::collection::vec(0u32..30, 1..5),
                                          extra in 0u32..20, cells in 1u32..8, q in 0usize..5) {
            let q = q % lens.len();
            let buf = buf_from(&lens, extra);
            let policy = AdmissionPolicy::uniform(PolicyKind::Pushout, Alpha::integer(1).unwrap(), lens.len());
            let p = PacketDescriptor { flow_id: 0, length_bytes: cells * 200, length_cells: cells,
                arrival_time: SimTime::ZERO, priority_class: 0, seq: 0 };
            let v = admit(&policy, q, &p, &buf);
            if buf.free_cells() >= cells {
                prop_assert_eq!(v.decision, Decision::Accept);
            }
            if let Some(victim) = v.pushout_victim {
                prop_assert!(victim != q);
                prop_assert!(buf.queue(victim).occupancy_cells() >= buf.queue(q).occupancy_cells());
            }
            // determinism
            prop_assert_eq!(v, admit(&policy, q, &p, &buf));
        }
    }
}
