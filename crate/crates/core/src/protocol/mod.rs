//! Secure clustering, energy-aware private election, masked aggregation
//! and authenticated collection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{Key, KeyChain, MaskValue, PairwiseKey};
use crate::netsim::{Addr, MsgType, NodeId, Point};

pub mod clustering;
pub mod election;
pub(crate) mod frames;
pub mod recovery;
mod sim;

pub use clustering::{merge_small_clusters, phase1_cluster, phase1_ring};
pub use election::{aggregator_probabilities, phase2_chance, sample_election, ElectionDraw, ElectionParams, StreamCtx};
pub use recovery::{phase4_recover, recover_from_residue, ReadingRange, RecoveryResult};
pub use sim::{
    AttemptRecord, EpochOutcome, InsiderAction, InsiderPolicy, PhaseCounts, RingOptions, RingOutcome, SetupOutcome,
    Simulation, Stall,
};

/// A cluster is named after the beacon that founded it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    #[default]
    Unassigned,
    Member,
    Aggregator,
}

/// Per-node protocol state. Roles and chances live here for inspection by
/// the simulator; no protocol message ever carries them.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub position: Point,
    pub role: Role,
    pub cluster_id: Option<ClusterId>,
    pub right_neighbor: Option<NodeId>,
    /// Learned from the first authenticated ring token of an epoch.
    pub left_neighbor: Option<NodeId>,
    pub pairwise_key: PairwiseKey,
    pub last_chain_key: Key,
    pub election_chance: f64,
    pub stored_aggregate: Option<u64>,
}

/// A ring in tour order; `members[i + 1]` is the right neighbour of `members[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ring {
    pub cluster: ClusterId,
    pub members: Vec<NodeId>,
}

impl Ring {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.members.iter().position(|&m| m == id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.members.contains(&id)
    }

    pub fn right_of(&self, id: NodeId) -> Option<NodeId> {
        self.index_of(id).map(|i| self.members[(i + 1) % self.len()])
    }

    pub fn left_of(&self, id: NodeId) -> Option<NodeId> {
        self.index_of(id).map(|i| self.members[(i + self.len() - 1) % self.len()])
    }
}

/// What the base station receives back from a ring query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryState {
    #[serde(with = "hex_nonce")]
    pub nonce: [u8; 16],
    pub accumulated: MaskValue,
    pub entry: NodeId,
}

mod hex_nonce {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let bytes = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        bytes.try_into().map_err(|_| serde::de::Error::custom("nonce must be 16 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Election,
    Existence,
    Aggregation,
    Query,
    Disclosure,
}

impl Phase {
    pub fn of(msg_type: MsgType) -> Phase {
        match msg_type {
            MsgType::Beacon | MsgType::ClusterReport | MsgType::RingSetup => Phase::Setup,
            MsgType::EnergyToken => Phase::Election,
            MsgType::ExistenceBit => Phase::Existence,
            MsgType::DataToken => Phase::Aggregation,
            MsgType::Query | MsgType::QueryResponse => Phase::Query,
            MsgType::KeyDisclosure => Phase::Disclosure,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionKind {
    /// Frame failed MAC verification or did not decode.
    BadFrame { msg_type: MsgType },
    /// A chain key failed one-way verification (forged or replayed).
    ChainRejected,
}

/// A node or the base station noticing tampering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    /// Event index of the delivery that triggered the detection.
    pub t: u64,
    /// Event index of the offending transmission.
    pub t_sent: u64,
    pub epoch: u32,
    pub at: Addr,
    #[serde(flatten)]
    pub kind: DetectionKind,
}

/// Key material every node is loaded with before deployment.
pub fn phase1_provision(n: usize, master_seed: &Key, chain: &KeyChain) -> Vec<(PairwiseKey, Key)> {
    (0..n).map(|i| (PairwiseKey::derive(master_seed, NodeId::from(i)), *chain.commitment())).collect()
}
