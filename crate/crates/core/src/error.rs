use std::path::PathBuf;

use crate::netsim::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("orphan nodes heard no beacon: {0:?}")]
    OrphanNodes(Vec<NodeId>),

    #[error("ring has no remaining energy (average {0} J)")]
    DeadRing(f64),

    #[error("reading {value} of node {node} outside [{lo}, {hi}]")]
    InvalidReading { node: NodeId, value: u64, lo: u64, hi: u64 },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("aggregator count is ambiguous for residue {residue}: candidates {candidates:?}")]
    Ambiguity { residue: u64, candidates: Vec<(u32, u64)> },

    #[error("event budget of {budget} exceeded")]
    NonTermination { budget: u64 },

    #[error("key chain exhausted after {0} disclosures")]
    ChainExhausted(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
