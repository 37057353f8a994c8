//! Deterministic discrete-event radio network.
//!
//! Logical time is an event counter: every transmission and every delivery
//! consumes one tick. Messages are delivered in FIFO order. Each transmission
//! is appended to the [`Transcript`], which holds metadata plus an 8-byte
//! digest of the payload and is the whole view of a passive eavesdropper.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{self, Tag, TAG_LEN};
use crate::energy::{Battery, EnergyModel};
use crate::error::{Error, Result};

/// Dense node identifier, `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i as u32)
    }
}

/// Sender or receiver of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Node(NodeId),
    BaseStation,
    Broadcast,
}

impl Addr {
    pub fn node(self) -> Option<NodeId> {
        match self {
            Addr::Node(id) => Some(id),
            _ => None,
        }
    }

    fn wire(self) -> u32 {
        match self {
            Addr::Node(id) => id.0,
            Addr::BaseStation => u32::MAX - 1,
            Addr::Broadcast => u32::MAX,
        }
    }
}

impl From<NodeId> for Addr {
    fn from(id: NodeId) -> Self {
        Addr::Node(id)
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Node(id) => write!(f, "{id}"),
            Addr::BaseStation => f.write_str("BS"),
            Addr::Broadcast => f.write_str("BROADCAST"),
        }
    }
}

impl FromStr for Addr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BS" => Ok(Addr::BaseStation),
            "BROADCAST" => Ok(Addr::Broadcast),
            _ => s
                .parse::<u32>()
                .map(|v| Addr::Node(NodeId(v)))
                .map_err(|_| Error::InvalidParameter(format!("bad address {s:?}"))),
        }
    }
}

impl Serialize for Addr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Addr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Beacon,
    ClusterReport,
    RingSetup,
    EnergyToken,
    ExistenceBit,
    DataToken,
    Query,
    QueryResponse,
    KeyDisclosure,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::Beacon,
        MsgType::ClusterReport,
        MsgType::RingSetup,
        MsgType::EnergyToken,
        MsgType::ExistenceBit,
        MsgType::DataToken,
        MsgType::Query,
        MsgType::QueryResponse,
        MsgType::KeyDisclosure,
    ];

    fn wire(self) -> u8 {
        self as u8
    }
}

/// Fixed frame header: type, sender, receiver and length fields.
pub const HEADER_BITS: u64 = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MsgType,
    pub sender: Addr,
    pub receiver: Addr,
    pub payload: Vec<u8>,
    pub mac: Option<Tag>,
}

impl Message {
    pub fn new(msg_type: MsgType, sender: impl Into<Addr>, receiver: impl Into<Addr>, payload: Vec<u8>) -> Self {
        Self { msg_type, sender: sender.into(), receiver: receiver.into(), payload, mac: None }
    }

    pub fn size_bits(&self) -> u64 {
        HEADER_BITS + 8 * self.payload.len() as u64 + if self.mac.is_some() { 8 * TAG_LEN as u64 } else { 0 }
    }

    /// Bytes covered by the frame MAC: header fields and payload.
    pub fn authenticated_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(9 + self.payload.len());
        v.push(self.msg_type.wire());
        v.extend_from_slice(&self.sender.wire().to_le_bytes());
        v.extend_from_slice(&self.receiver.wire().to_le_bytes());
        v.extend_from_slice(&self.payload);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub width: f64,
    pub height: f64,
}

impl Field {
    pub fn contains(&self, p: &Point) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn center(&self) -> Point {
        Point::new(self.width / 2.0, self.height / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub positions: Vec<Point>,
    pub field: Field,
    pub base_station: Point,
    pub seed: u64,
}

impl Deployment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Point {
        self.positions[id.index()]
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.position(a).distance(&self.position(b))
    }

    pub fn distance_to_bs(&self, a: NodeId) -> f64 {
        self.position(a).distance(&self.base_station)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.positions.len()).map(NodeId::from)
    }
}

/// Places `n` nodes uniformly at random in the field. The base station sits
/// at the field centre.
pub fn deploy(n: usize, field: Field, seed: u64) -> Result<Deployment> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 nodes for a ring, got {n}")));
    }
    if !(field.width > 0.0 && field.height > 0.0) {
        return Err(Error::InvalidParameter("field dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| Point::new(rng.gen::<f64>() * field.width, rng.gen::<f64>() * field.height))
        .collect();
    Ok(Deployment { positions, field, base_station: field.center(), seed })
}

/// Minimum distance used by the inverse-square strength model.
pub const D_MIN: f64 = 0.1;

pub fn rssi(deployment: &Deployment, sender: NodeId, receiver: NodeId, p_tx: f64) -> Result<f64> {
    if sender == receiver {
        return Err(Error::InvalidParameter(format!("rssi of node {sender} to itself")));
    }
    let d = deployment.distance(sender, receiver);
    Ok(p_tx / (d * d).max(D_MIN * D_MIN))
}

mod digest_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 8], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes.try_into().map_err(|_| serde::de::Error::custom("digest must be 8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: u64,
    pub sender: Addr,
    pub receiver: Addr,
    pub msg_type: MsgType,
    pub size_bits: u64,
    #[serde(with = "digest_hex")]
    pub payload_digest: [u8; 8],
}

/// Everything about a transmission except its content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Metadata {
    pub t: u64,
    pub sender: Addr,
    pub receiver: Addr,
    pub msg_type: MsgType,
    pub size_bits: u64,
}

impl TranscriptEntry {
    pub fn metadata(&self) -> Metadata {
        Metadata {
            t: self.t,
            sender: self.sender,
            receiver: self.receiver,
            msg_type: self.msg_type,
            size_bits: self.size_bits,
        }
    }
}

/// Append-only log of every observable transmission.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self, range: Range<usize>) -> Vec<Metadata> {
        self.entries[range].iter().map(TranscriptEntry::metadata).collect()
    }

    pub fn count(&self, msg_type: MsgType) -> usize {
        self.entries.iter().filter(|e| e.msg_type == msg_type).count()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(format!("transcript line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| Error::Config(format!("transcript line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptAction {
    Modified,
    Dropped,
}

/// Noteworthy non-transmission events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NetEvent {
    /// Unicast receiver was out of radio range; the frame was lost.
    DeliveryFailure { t: u64, sender: Addr, receiver: Addr, msg_type: MsgType },
    /// A dead node tried to transmit.
    SenderDead { t: u64, sender: NodeId, msg_type: MsgType },
    NodeDied { t: u64, node: NodeId },
    /// Receiver was dead (or died receiving) so the frame was not processed.
    Undeliverable { t: u64, t_sent: u64, receiver: NodeId, msg_type: MsgType },
    Intercepted { t: u64, t_sent: u64, sender: Addr, receiver: Addr, msg_type: MsgType, action: InterceptAction },
    Injected { t: u64, sender: Addr, receiver: Addr, msg_type: MsgType },
}

/// What an in-flight interceptor did to a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interception {
    Pass,
    Modified,
    Dropped,
}

/// Hook for active adversaries sitting on the channel.
pub trait Interceptor: Send {
    /// Called once per frame before delivery; may rewrite it in place.
    fn on_air(&mut self, t_sent: u64, msg: &mut Message) -> Interception;

    /// Frames to inject whenever the network goes idle.
    fn inject(&mut self) -> Vec<Message> {
        Vec::new()
    }

    fn box_clone(&self) -> Box<dyn Interceptor>;
}

impl Clone for Box<dyn Interceptor> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    /// Event index of this delivery.
    pub t: u64,
    /// Event index of the transmission.
    pub t_sent: u64,
    pub to: Addr,
    pub msg: Message,
}

#[derive(Clone, Debug)]
struct InFlight {
    t_sent: u64,
    msg: Message,
}

pub const DEFAULT_EVENT_BUDGET: u64 = 1_000_000;

#[derive(Clone)]
pub struct Network {
    deployment: Deployment,
    model: EnergyModel,
    radio_radius: f64,
    batteries: Vec<Battery>,
    transcript: Transcript,
    events: Vec<NetEvent>,
    queue: VecDeque<InFlight>,
    clock: u64,
    event_budget: u64,
    consumed: f64,
    interceptor: Option<Box<dyn Interceptor>>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("nodes", &self.deployment.len())
            .field("clock", &self.clock)
            .field("transcript", &self.transcript.len())
            .field("queued", &self.queue.len())
            .finish()
    }
}

impl Network {
    pub fn new(deployment: Deployment, model: EnergyModel, radio_radius: f64, batteries: Vec<Battery>) -> Result<Self> {
        if batteries.len() != deployment.len() {
            return Err(Error::InvalidParameter(format!(
                "{} batteries for {} nodes",
                batteries.len(),
                deployment.len()
            )));
        }
        if !(radio_radius > 0.0) {
            return Err(Error::InvalidParameter(format!("radio radius must be positive, got {radio_radius}")));
        }
        model.validate()?;
        Ok(Self {
            deployment,
            model,
            radio_radius,
            batteries,
            transcript: Transcript::default(),
            events: Vec::new(),
            queue: VecDeque::new(),
            clock: 0,
            event_budget: DEFAULT_EVENT_BUDGET,
            consumed: 0.0,
            interceptor: None,
        })
    }

    pub fn set_event_budget(&mut self, budget: u64) {
        self.event_budget = budget;
    }

    pub fn set_interceptor(&mut self, interceptor: Option<Box<dyn Interceptor>>) {
        self.interceptor = interceptor;
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn model(&self) -> &EnergyModel {
        &self.model
    }

    pub fn radio_radius(&self) -> f64 {
        self.radio_radius
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn events(&self) -> &[NetEvent] {
        &self.events
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn battery(&self, id: NodeId) -> &Battery {
        &self.batteries[id.index()]
    }

    pub fn batteries(&self) -> &[Battery] {
        &self.batteries
    }

    /// Overwrites a node's charge (scenario setup and tests).
    pub fn set_remaining(&mut self, id: NodeId, remaining: f64) {
        let cap = self.batteries[id.index()].capacity();
        self.batteries[id.index()] = Battery::with_level(cap, remaining);
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.batteries[id.index()].is_alive()
    }

    pub fn alive_count(&self) -> usize {
        self.batteries.iter().filter(|b| b.is_alive()).count()
    }

    pub fn total_remaining(&self) -> f64 {
        self.batteries.iter().map(Battery::remaining).sum()
    }

    /// Sum of every charge applied so far.
    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        self.deployment.distance(a, b) <= self.radio_radius
    }

    fn tick(&mut self) -> u64 {
        let t = self.clock;
        self.clock += 1;
        t
    }

    fn charge(&mut self, node: NodeId, amount: f64) {
        let battery = &mut self.batteries[node.index()];
        let was_alive = battery.is_alive();
        self.consumed += battery.draw(amount);
        if was_alive && !battery.is_alive() {
            let t = self.clock;
            self.events.push(NetEvent::NodeDied { t, node });
        }
    }

    /// Non-radio energy use (idle listening, aggregation work).
    pub fn charge_compute(&mut self, node: NodeId, amount: f64) {
        if amount > 0.0 && self.is_alive(node) {
            self.charge(node, amount);
        }
    }

    fn tx_distance(&self, sender: NodeId, receiver: Addr) -> f64 {
        match receiver {
            Addr::Node(r) => self.deployment.distance(sender, r),
            Addr::BaseStation => self.deployment.distance_to_bs(sender),
            Addr::Broadcast => self.radio_radius,
        }
    }

    fn record(&mut self, t: u64, msg: &Message) {
        self.transcript.push(TranscriptEntry {
            t,
            sender: msg.sender,
            receiver: msg.receiver,
            msg_type: msg.msg_type,
            size_bits: msg.size_bits(),
            payload_digest: crypto::digest8(&msg.payload),
        });
    }

    /// Transmits a frame. Returns the send event index, or `None` when the
    /// sender is dead and nothing went on air.
    ///
    /// Node uplinks to the base station are not range-limited; node-to-node
    /// unicasts beyond the radio radius are lost after paying the tx cost.
    pub fn send(&mut self, msg: Message) -> Option<u64> {
        let t = self.tick();
        if let Addr::Node(sender) = msg.sender {
            if !self.is_alive(sender) {
                self.events.push(NetEvent::SenderDead { t, sender, msg_type: msg.msg_type });
                return None;
            }
            let cost = self
                .model
                .tx_cost(msg.size_bits(), self.tx_distance(sender, msg.receiver))
                .expect("distances are non-negative");
            self.charge(sender, cost);
            self.record(t, &msg);
            if let Addr::Node(r) = msg.receiver {
                if !self.in_range(sender, r) {
                    self.events.push(NetEvent::DeliveryFailure {
                        t,
                        sender: msg.sender,
                        receiver: msg.receiver,
                        msg_type: msg.msg_type,
                    });
                    return Some(t);
                }
            }
        } else {
            self.record(t, &msg);
        }
        self.queue.push_back(InFlight { t_sent: t, msg });
        Some(t)
    }

    /// Puts a forged frame on the air without charging anyone.
    fn inject(&mut self, msg: Message) {
        let t = self.tick();
        self.record(t, &msg);
        self.events.push(NetEvent::Injected { t, sender: msg.sender, receiver: msg.receiver, msg_type: msg.msg_type });
        self.queue.push_back(InFlight { t_sent: t, msg });
    }

    fn recipients(&self, msg: &Message) -> Vec<Addr> {
        match (msg.sender, msg.receiver) {
            (_, Addr::Node(r)) => vec![Addr::Node(r)],
            (_, Addr::BaseStation) => vec![Addr::BaseStation],
            (Addr::Node(s), Addr::Broadcast) => self
                .deployment
                .node_ids()
                .filter(|&id| id != s && self.in_range(s, id))
                .map(Addr::Node)
                .collect(),
            (_, Addr::Broadcast) => self.deployment.node_ids().map(Addr::Node).collect(),
        }
    }

    /// Drains the event queue, handing every successful delivery to
    /// `handler`. Returns the number of frames processed.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> Result<u64>
    where
        F: FnMut(&mut Network, &Delivery) -> Result<()>,
    {
        let mut processed = 0u64;
        loop {
            if self.queue.is_empty() {
                let injected = self.interceptor.as_mut().map(|i| i.inject()).unwrap_or_default();
                if injected.is_empty() {
                    break;
                }
                for m in injected {
                    self.inject(m);
                }
            }
            let Some(InFlight { t_sent, mut msg }) = self.queue.pop_front() else { break };
            processed += 1;
            if processed > self.event_budget {
                self.queue.clear();
                return Err(Error::NonTermination { budget: self.event_budget });
            }
            let t = self.tick();
            if let Some(icpt) = self.interceptor.as_mut() {
                let (sender, receiver, msg_type) = (msg.sender, msg.receiver, msg.msg_type);
                let action = match icpt.on_air(t_sent, &mut msg) {
                    Interception::Pass => None,
                    Interception::Modified => Some(InterceptAction::Modified),
                    Interception::Dropped => Some(InterceptAction::Dropped),
                };
                if let Some(action) = action {
                    self.events.push(NetEvent::Intercepted { t, t_sent, sender, receiver, msg_type, action });
                    if action == InterceptAction::Dropped {
                        continue;
                    }
                }
            }
            let bits = msg.size_bits();
            for to in self.recipients(&msg) {
                if let Addr::Node(r) = to {
                    if !self.is_alive(r) {
                        if msg.receiver != Addr::Broadcast {
                            self.events.push(NetEvent::Undeliverable { t, t_sent, receiver: r, msg_type: msg.msg_type });
                        }
                        continue;
                    }
                    let cost = self.model.rx_cost(bits);
                    self.charge(r, cost);
                    if !self.is_alive(r) {
                        self.events.push(NetEvent::Undeliverable { t, t_sent, receiver: r, msg_type: msg.msg_type });
                        continue;
                    }
                }
                let delivery = Delivery { t, t_sent, to, msg: msg.clone() };
                handler(self, &delivery)?;
            }
        }
        Ok(processed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_net(xs: &[f64], radius: f64) -> Network {
        let dep = Deployment {
            positions: xs.iter().map(|&x| Point::new(x, 0.0)).collect(),
            field: Field { width: 100.0, height: 100.0 },
            base_station: Point::new(0.0, 50.0),
            seed: 0,
        };
        let batteries = vec![Battery::full(1.0); xs.len()];
        Network::new(dep, EnergyModel::default(), radius, batteries).unwrap()
    }

    #[test]
    fn deploy_is_deterministic_and_in_field() {
        let field = Field { width: 100.0, height: 100.0 };
        let a = deploy(5, field, 42).unwrap();
        assert_eq!(a, deploy(5, field, 42).unwrap());
        assert!(a.positions.iter().all(|p| field.contains(p)));
        assert_ne!(a, deploy(5, field, 43).unwrap());
    }

    #[test]
    fn deploy_tiny_field_distinct() {
        let d = deploy(3, Field { width: 1.0, height: 1.0 }, 7).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(d.positions[i], d.positions[j]);
            }
        }
    }

    #[test]
    fn deploy_rejects_small_n() {
        assert!(matches!(deploy(2, Field { width: 1.0, height: 1.0 }, 1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn rssi_examples() {
        let net = line_net(&[0.0, 1.0, 2.0, 0.05], 10.0);
        let dep = net.deployment();
        assert_eq!(rssi(dep, NodeId(0), NodeId(1), 1.0).unwrap(), 1.0);
        assert_eq!(rssi(dep, NodeId(0), NodeId(2), 1.0).unwrap(), 0.25);
        let floored = rssi(dep, NodeId(0), NodeId(3), 1.0).unwrap();
        assert!((floored - 100.0).abs() < 1e-9);
        assert!(rssi(dep, NodeId(1), NodeId(1), 1.0).is_err());
    }

    #[test]
    fn broadcast_counts() {
        // node 0 with three neighbours in range and one out of range
        let mut net = line_net(&[0.0, 5.0, 10.0, 15.0, 80.0], 20.0);
        let before: Vec<f64> = net.batteries().iter().map(|b| b.remaining()).collect();
        net.send(Message::new(MsgType::Beacon, NodeId(0), Addr::Broadcast, vec![1, 2, 3, 4]));
        let mut got = Vec::new();
        net.run_until_idle(|_, d| {
            got.push(d.to);
            Ok(())
        })
        .unwrap();
        assert_eq!(net.transcript().len(), 1);
        assert_eq!(got.len(), 3);
        let debited: Vec<usize> =
            (0..5).filter(|&i| net.batteries()[i].remaining() < before[i]).collect();
        assert_eq!(debited, vec![0, 1, 2, 3]);
        let bits = HEADER_BITS + 32;
        let m = EnergyModel::default();
        let expected = m.tx_cost(bits, 20.0).unwrap() + 3.0 * m.rx_cost(bits);
        assert!((net.consumed() - expected).abs() < 1e-18);
    }

    #[test]
    fn out_of_range_unicast_dropped() {
        let mut net = line_net(&[0.0, 50.0, 10.0], 20.0);
        net.send(Message::new(MsgType::DataToken, NodeId(0), NodeId(1), vec![0; 8]));
        let n = net.run_until_idle(|_, _| panic!("nothing should arrive")).unwrap();
        assert_eq!(n, 0);
        assert_eq!(net.transcript().len(), 1);
        assert!(matches!(net.events()[0], NetEvent::DeliveryFailure { .. }));
        assert!(net.battery(NodeId(0)).remaining() < 1.0);
        assert_eq!(net.battery(NodeId(1)).remaining(), 1.0);
    }

    #[test]
    fn delivery_after_send() {
        let mut net = line_net(&[0.0, 5.0, 10.0], 20.0);
        net.send(Message::new(MsgType::DataToken, NodeId(0), NodeId(1), vec![0; 8]));
        net.run_until_idle(|net, d| {
            assert!(d.t > d.t_sent);
            if d.to == Addr::Node(NodeId(1)) {
                net.send(Message::new(MsgType::DataToken, NodeId(1), NodeId(2), vec![0; 8]));
            }
            Ok(())
        })
        .unwrap();
        let ts: Vec<u64> = net.transcript().entries().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![0, 2]);
    }

    #[test]
    fn budget_trips() {
        let mut net = line_net(&[0.0, 5.0, 10.0], 20.0);
        net.set_event_budget(10);
        net.send(Message::new(MsgType::DataToken, NodeId(0), NodeId(1), vec![]));
        let r = net.run_until_idle(|net, d| {
            let me = d.to.node().unwrap();
            let next = NodeId((me.0 + 1) % 3);
            net.send(Message::new(MsgType::DataToken, me, next, vec![]));
            Ok(())
        });
        assert!(matches!(r, Err(Error::NonTermination { budget: 10 })));
    }

    #[test]
    fn dead_sender_sends_nothing() {
        let mut net = line_net(&[0.0, 5.0, 10.0], 20.0);
        net.set_remaining(NodeId(0), 0.0);
        assert_eq!(net.send(Message::new(MsgType::DataToken, NodeId(0), NodeId(1), vec![])), None);
        assert!(net.transcript().is_empty());
    }

    #[test]
    fn transcript_jsonl_roundtrip() {
        let mut net = line_net(&[0.0, 5.0, 10.0], 20.0);
        net.send(Message::new(MsgType::Query, Addr::BaseStation, NodeId(1), vec![9; 12]));
        net.send(Message::new(MsgType::QueryResponse, NodeId(1), Addr::BaseStation, vec![1; 3]));
        let mut buf = Vec::new();
        net.transcript().write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"sender\":\"BS\""));
        let back = Transcript::read_jsonl(&buf[..]).unwrap();
        assert_eq!(&back, net.transcript());
    }
}
