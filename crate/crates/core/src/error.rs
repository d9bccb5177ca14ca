use std::path::PathBuf;

use thiserror::Error;

use crate::model::QueueId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("cell size must be positive")]
    ZeroCellSize,
    #[error("zero-length packet")]
    EmptyPacket,
    #[error("packet of {length_bytes} bytes exceeds MTU {mtu}")]
    OverMtu { length_bytes: u32, mtu: u32 },
    #[error("enqueue of {needed} cells with only {free} free (admission bug)")]
    InsufficientFreeCells { needed: u32, free: u32 },
    #[error("queue {0} has no packet")]
    NoPacket(QueueId),
    #[error("conservation violated: free {free} + resident {resident} != capacity {capacity}")]
    Conservation {
        free: u32,
        resident: u64,
        capacity: u32,
    },
    #[error("queue {0} occupancy counters disagree with its FIFO")]
    QueueAccounting(QueueId),
    #[error("queue {queue} leaked cells: enqueued {enqueued}, accounted {accounted}")]
    Leak {
        queue: QueueId,
        enqueued: u64,
        accounted: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("formula needs at least one congested queue")]
    NoCongestedQueues,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpulsionError {
    #[error("selected victim queue {0} is empty or no longer over-allocated")]
    NoVictim(QueueId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CdfError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("CDF has no points")]
    Empty,
    #[error("CDF must end at probability 1.0, ends at {0}")]
    BadTail(f64),
    #[error("CDF not strictly increasing at point {0}")]
    NotIncreasing(usize),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("slot {slot}: {source}")]
    Invariant {
        slot: u64,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cdf {path}: {source}")]
    Cdf {
        path: String,
        #[source]
        source: CdfError,
    },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event stream out of order at record {index}")]
    OutOfOrder { index: usize },
    #[error("slowdown needs a positive ideal duration")]
    ZeroIdeal,
    #[error("event for queue {queue} but only {queues} queues")]
    UnknownQueue { queue: usize, queues: usize },
    #[error("event at {time_ns}ns removes more cells than the queue holds")]
    ReplayUnderflow { time_ns: u64 },
    #[error("burst search: {0}")]
    Burst(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
