use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{chain_verify, derive_seed, link_key, mask_hash, pad_derive, Key, KeyChain, MaskValue};
use crate::energy::Battery;
use crate::error::{Error, Result};
use crate::netsim::{deploy, Addr, Interceptor, Message, MsgType, NetEvent, Network, NodeId, Point};
use crate::scenario::Scenario;

use super::clustering::{best_beacon, choose_beacons, merge_small_clusters, phase1_ring};
use super::election::{decide_role, phase2_chance, ElectionParams, StreamCtx};
use super::frames::{self, DataBody, EnergyBody, Nonces, ParityBody, Pass, QueryBody, ReportBody, ResponseBody, SetupBody};
use super::recovery::{phase4_recover, RecoveryResult};
use super::{phase1_provision, ClusterId, Detection, DetectionKind, NodeState, Phase, QueryState, Ring, Role};

/// Behaviour of nodes under adversary control.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InsiderPolicy {
    pub controlled: BTreeSet<NodeId>,
    /// Multiplier applied to the energy a controlled node reports and uses
    /// for its own chance.
    pub inflate_energy: Option<f64>,
    /// Controlled nodes swallow election tokens instead of forwarding them.
    pub drop_tokens: bool,
}

/// One misreport by a controlled node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InsiderAction {
    pub epoch: u32,
    pub cluster: ClusterId,
    pub node: NodeId,
    pub attempt: u32,
    pub true_energy: f64,
    pub reported_energy: f64,
}

/// Per-ring overrides, mainly for tests and the privacy checkers.
#[derive(Clone, Debug, Default)]
pub struct RingOptions {
    /// Replaces every private role draw with membership in this set.
    pub forced_roles: Option<BTreeSet<NodeId>>,
    /// Replaces generated readings.
    pub readings: Option<BTreeMap<NodeId, u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stall {
    pub phase: Phase,
    pub attempt: u32,
    pub reason: String,
    /// Last authenticated hop before progress stopped.
    pub last_hop: Option<(NodeId, NodeId)>,
    pub events: Vec<NetEvent>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub setup: u64,
    pub election: u64,
    pub existence: u64,
    pub aggregation: u64,
    pub query: u64,
    pub disclosure: u64,
}

impl PhaseCounts {
    fn add(&mut self, phase: Phase) {
        match phase {
            Phase::Setup => self.setup += 1,
            Phase::Election => self.election += 1,
            Phase::Existence => self.existence += 1,
            Phase::Aggregation => self.aggregation += 1,
            Phase::Query => self.query += 1,
            Phase::Disclosure => self.disclosure += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.setup + self.election + self.existence + self.aggregation + self.query + self.disclosure
    }

    pub fn merge(&mut self, o: &PhaseCounts) {
        self.setup += o.setup;
        self.election += o.election;
        self.existence += o.existence;
        self.aggregation += o.aggregation;
        self.query += o.query;
        self.disclosure += o.disclosure;
    }
}

/// One election attempt: token average, private draws, parity rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub starter: Option<NodeId>,
    pub e_sum: Option<f64>,
    pub counter: Option<u32>,
    pub e_avg: Option<f64>,
    pub chances: BTreeMap<NodeId, f64>,
    /// Nodes whose private draw made them aggregators.
    pub drawn: BTreeSet<NodeId>,
    pub parities: Vec<bool>,
    pub tampered: bool,
    pub election_complete: bool,
    pub existence_complete: bool,
}

impl AttemptRecord {
    pub fn found_aggregator(&self) -> bool {
        self.parities.iter().any(|&p| p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RingOutcome {
    pub cluster: ClusterId,
    pub members: Vec<NodeId>,
    /// Remaining energy of each member when the election started.
    pub snapshot: Vec<f64>,
    pub params: ElectionParams,
    pub attempts: Vec<AttemptRecord>,
    pub fallback: bool,
    pub aggregators: Vec<NodeId>,
    pub readings: Vec<u64>,
    pub ring_total: Option<u64>,
    pub query: Option<QueryState>,
    pub recovered: Option<RecoveryResult>,
    pub recovery_error: Option<String>,
    pub messages: PhaseCounts,
    pub stall: Option<Stall>,
    pub transcript: Range<usize>,
}

impl RingOutcome {
    pub fn completed(&self) -> bool {
        self.stall.is_none() && self.query.is_some()
    }

    pub fn true_sum(&self) -> u64 {
        self.readings.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SetupOutcome {
    pub reclustered: bool,
    pub rings: Vec<Ring>,
    pub orphans: Vec<NodeId>,
    pub messages: PhaseCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochOutcome {
    pub epoch: u32,
    /// Fewer than 3 nodes were alive; nothing ran.
    pub halted: bool,
    pub setup: SetupOutcome,
    pub rings: Vec<RingOutcome>,
    pub alive_start: usize,
    pub alive_end: usize,
    pub deaths: Vec<NodeId>,
    pub energy_consumed: f64,
    pub messages: PhaseCounts,
    pub transcript: Range<usize>,
    pub events: Range<usize>,
    pub detections: Range<usize>,
}

impl EpochOutcome {
    pub fn elected(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.rings.iter().flat_map(|r| r.aggregators.iter().copied()).collect();
        v.sort();
        v
    }
}

#[derive(Clone, Debug)]
struct BaseStation {
    position: Point,
    master: Key,
    chain: KeyChain,
    keys: Vec<Key>,
    epoch_key: Option<(usize, Key)>,
}

/// Full protocol run over a simulated network.
#[derive(Clone, Debug)]
pub struct Simulation {
    scenario: Scenario,
    net: Network,
    nodes: Vec<NodeState>,
    bs: BaseStation,
    epoch: u32,
    salt: u64,
    nonces: Nonces,
    rings: Vec<Ring>,
    detections: Vec<Detection>,
    insider: Option<InsiderPolicy>,
    insider_log: Vec<InsiderAction>,
    storage_ack_leak: bool,
}

fn stall(phase: Phase, attempt: u32, reason: impl Into<String>, last_hop: Option<(NodeId, NodeId)>) -> Stall {
    Stall { phase, attempt, reason: reason.into(), last_hop, events: Vec::new() }
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let mut dep = deploy(scenario.n, scenario.field, scenario.seed)?;
        dep.base_station = scenario.base_station_position();

        let cap = scenario.battery_capacity;
        let mut batteries = vec![Battery::full(cap); scenario.n];
        let low = (scenario.low_energy_fraction * scenario.n as f64).round() as usize;
        let mut rng = ChaCha8Rng::from_seed(derive_seed("low-energy", &[scenario.seed]));
        for i in sample(&mut rng, scenario.n, low.min(scenario.n)) {
            batteries[i] = Battery::with_level(cap, cap * scenario.low_energy_level);
        }

        let master = derive_seed("bs-master", &[scenario.seed]);
        let chain = KeyChain::create(derive_seed("bs-chain", &[scenario.seed]), scenario.chain_length)?;
        let nodes: Vec<NodeState> = phase1_provision(scenario.n, &master, &chain)
            .into_iter()
            .enumerate()
            .map(|(i, (pairwise_key, commitment))| NodeState {
                id: NodeId::from(i),
                position: dep.positions[i],
                role: Role::Unassigned,
                cluster_id: None,
                right_neighbor: None,
                left_neighbor: None,
                pairwise_key,
                last_chain_key: commitment,
                election_chance: 0.0,
                stored_aggregate: None,
            })
            .collect();
        let keys = nodes.iter().map(|n| n.pairwise_key.key).collect();
        let bs = BaseStation { position: dep.base_station, master, chain, keys, epoch_key: None };

        let mut net = Network::new(dep, scenario.energy, scenario.radio_radius, batteries)?;
        net.set_event_budget(scenario.event_budget);
        Ok(Self {
            scenario: scenario.clone(),
            net,
            nodes,
            bs,
            epoch: 0,
            salt: 0,
            nonces: Nonces::default(),
            rings: Vec::new(),
            detections: Vec::new(),
            insider: None,
            insider_log: Vec::new(),
            storage_ack_leak: false,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.nodes[id.index()]
    }

    /// Direct access to node state, for constructing faulty configurations.
    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeState {
        &mut self.nodes[id.index()]
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn rings(&self) -> &[Ring] {
        &self.rings
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn insider_log(&self) -> &[InsiderAction] {
        &self.insider_log
    }

    pub fn base_station_position(&self) -> Point {
        self.bs.position
    }

    pub fn chain_commitment(&self) -> Key {
        *self.bs.chain.commitment()
    }

    /// Key the base station uses for queries in the current epoch.
    pub fn epoch_chain_key(&self) -> Option<(usize, Key)> {
        self.bs.epoch_key
    }

    pub fn pairwise_key(&self, id: NodeId) -> Key {
        self.bs.keys[id.index()]
    }

    /// Changes election randomness only; deployment, keys and readings stay put.
    pub fn set_election_salt(&mut self, salt: u64) {
        self.salt = salt;
    }

    pub fn set_interceptor(&mut self, interceptor: Option<Box<dyn Interceptor>>) {
        self.net.set_interceptor(interceptor);
    }

    pub fn set_insider(&mut self, policy: Option<InsiderPolicy>) {
        self.insider = policy;
    }

    /// Broken variant where aggregators acknowledge storage with an extra
    /// uplink frame. Only useful as a counterexample for role privacy.
    pub fn set_storage_ack_leak(&mut self, on: bool) {
        self.storage_ack_leak = on;
    }

    pub fn stream(&self, cluster: ClusterId) -> StreamCtx {
        StreamCtx { seed: self.scenario.seed, salt: self.salt, epoch: self.epoch, cluster }
    }

    pub fn election_params(&self, ring_size: usize) -> ElectionParams {
        let s = &self.scenario;
        ElectionParams::for_ring(s.p_base, s.target_aggregators, s.effective_beta(), ring_size)
    }

    /// Reading node `id` reports in the current epoch.
    pub fn reading(&self, id: NodeId) -> u64 {
        let r = self.scenario.reading_range;
        let mut rng = ChaCha8Rng::from_seed(derive_seed("reading", &[self.scenario.seed, self.epoch as u64, id.0 as u64]));
        rng.gen_range(r.lo..=r.hi)
    }

    fn alive(&self) -> Vec<NodeId> {
        self.net.deployment().node_ids().filter(|&id| self.net.is_alive(id)).collect()
    }

    fn counts(&self, range: Range<usize>) -> PhaseCounts {
        let injected: BTreeSet<u64> = self
            .net
            .events()
            .iter()
            .filter_map(|e| match e {
                NetEvent::Injected { t, .. } => Some(*t),
                _ => None,
            })
            .collect();
        let mut c = PhaseCounts::default();
        for e in &self.net.transcript().entries()[range] {
            if !injected.contains(&e.t) {
                c.add(Phase::of(e.msg_type));
            }
        }
        c
    }

    fn detect(&mut self, t: u64, t_sent: u64, at: Addr, kind: DetectionKind) {
        self.detections.push(Detection { t, t_sent, epoch: self.epoch, at, kind });
    }

    /// Starts the next epoch: idle costs, fresh per-epoch state, chain key
    /// for queries, and clustering when needed.
    pub fn prepare_epoch(&mut self) -> Result<SetupOutcome> {
        self.epoch += 1;
        for id in self.alive() {
            self.net.charge_compute(id, self.scenario.energy.e_idle_round);
        }
        for n in &mut self.nodes {
            n.role = Role::Unassigned;
            n.stored_aggregate = None;
            n.election_chance = 0.0;
            n.left_neighbor = None;
        }
        self.bs.epoch_key = Some(self.bs.chain.disclose()?);
        if self.net.alive_count() < 3 {
            self.rings.clear();
            return Ok(SetupOutcome::default());
        }
        let stale = self.rings.is_empty()
            || self.rings.iter().any(|r| r.members.iter().any(|&m| !self.net.is_alive(m)));
        if !(self.scenario.recluster_every_epoch || stale) {
            return Ok(SetupOutcome { reclustered: false, rings: self.rings.clone(), ..Default::default() });
        }
        let t0 = self.net.transcript().len();
        let (rings, orphans) = self.form_clusters()?;
        self.rings = rings.clone();
        let messages = self.counts(t0..self.net.transcript().len());
        Ok(SetupOutcome { reclustered: true, rings, orphans, messages })
    }

    /// Beacon broadcast, cluster reports, base-station ring construction
    /// and ring setup.
    fn form_clusters(&mut self) -> Result<(Vec<Ring>, Vec<NodeId>)> {
        let alive = self.alive();
        let beacons = choose_beacons(&alive, self.scenario.beacons(), self.scenario.seed, self.epoch);
        for n in &mut self.nodes {
            n.cluster_id = None;
            n.right_neighbor = None;
        }
        for &b in &beacons {
            self.net.send(Message::new(MsgType::Beacon, b, Addr::Broadcast, b.0.to_le_bytes().to_vec()));
        }
        let mut heard: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        self.net.run_until_idle(|_, d| {
            if let (MsgType::Beacon, Addr::Node(me)) = (d.msg.msg_type, d.to) {
                if let Ok(b) = <[u8; 4]>::try_from(d.msg.payload.as_slice()) {
                    heard.entry(me).or_default().push(NodeId(u32::from_le_bytes(b)));
                }
            }
            Ok(())
        })?;

        let radius = self.scenario.radio_radius;
        let mut orphans = Vec::new();
        let mut choices = Vec::new();
        for &id in &alive {
            let options = heard.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let pick = if beacons.contains(&id) {
                Some(id)
            } else {
                best_beacon(self.net.deployment(), radius, id, options)
            };
            match pick {
                Some(b) => choices.push((id, b)),
                None => orphans.push(id),
            }
        }
        for &(id, b) in &choices {
            let p = self.nodes[id.index()].position;
            let body = ReportBody { cluster: b.0, x: p.x, y: p.y }.encode();
            let key = self.nodes[id.index()].pairwise_key.key;
            let msg = frames::sealed(&mut self.nonces, MsgType::ClusterReport, id, Addr::BaseStation, &key, &body);
            self.net.send(msg);
        }

        let mut reports: BTreeMap<NodeId, (ClusterId, Point)> = BTreeMap::new();
        let mut bad = Vec::new();
        {
            let keys = &self.bs.keys;
            self.net.run_until_idle(|_, d| {
                if d.msg.msg_type != MsgType::ClusterReport || d.to != Addr::BaseStation {
                    return Ok(());
                }
                let Some(from) = d.msg.sender.node().filter(|f| f.index() < keys.len()) else { return Ok(()) };
                match frames::open(&d.msg, &keys[from.index()]).and_then(|b| ReportBody::decode(&b)) {
                    Some(r) => {
                        reports.insert(from, (ClusterId(r.cluster), Point::new(r.x, r.y)));
                    }
                    None => bad.push((d.t, d.t_sent)),
                }
                Ok(())
            })?;
        }
        for (t, t_sent) in bad {
            self.detect(t, t_sent, Addr::BaseStation, DetectionKind::BadFrame { msg_type: MsgType::ClusterReport });
        }
        if reports.len() < 3 {
            return Ok((Vec::new(), orphans));
        }

        let mut clusters: BTreeMap<ClusterId, Vec<NodeId>> = BTreeMap::new();
        for (&id, &(c, _)) in &reports {
            clusters.entry(c).or_default().push(id);
        }
        let merged = merge_small_clusters(clusters, |id| reports[&id].1)?;
        let mut rings = Vec::new();
        for (cluster, members) in merged {
            let pts: Vec<(NodeId, Point)> = members.iter().map(|&m| (m, reports[&m].1)).collect();
            let order = phase1_ring(&pts, NodeId(cluster.0))?;
            let ring = Ring { cluster, members: order };
            for &m in &ring.members {
                let right = ring.right_of(m).expect("member");
                let d = reports[&m].1.distance(&reports[&right].1);
                if d > radius {
                    return Err(Error::InvalidScenario(format!(
                        "ring {cluster} hop {m} -> {right} spans {d:.2} m, beyond the {radius} m radio radius"
                    )));
                }
            }
            rings.push(ring);
        }
        for ring in &rings {
            for &m in &ring.members {
                let body = SetupBody { cluster: ring.cluster.0, right: ring.right_of(m).expect("member") }.encode();
                let msg =
                    frames::sealed(&mut self.nonces, MsgType::RingSetup, Addr::BaseStation, m, &self.bs.keys[m.index()], &body);
                self.net.send(msg);
            }
        }
        let mut bad = Vec::new();
        {
            let nodes = &mut self.nodes;
            self.net.run_until_idle(|_, d| {
                let (MsgType::RingSetup, Addr::Node(me), Addr::BaseStation) = (d.msg.msg_type, d.to, d.msg.sender) else {
                    return Ok(());
                };
                let node = &mut nodes[me.index()];
                match frames::open(&d.msg, &node.pairwise_key.key).and_then(|b| SetupBody::decode(&b)) {
                    Some(s) => {
                        node.cluster_id = Some(ClusterId(s.cluster));
                        node.right_neighbor = Some(s.right);
                    }
                    None => bad.push((d.t, d.t_sent, me)),
                }
                Ok(())
            })?;
        }
        for (t, t_sent, me) in bad {
            self.detect(t, t_sent, Addr::Node(me), DetectionKind::BadFrame { msg_type: MsgType::RingSetup });
        }
        Ok((rings, orphans))
    }

    fn reported_energy(&self, id: NodeId, true_energy: f64) -> f64 {
        match &self.insider {
            Some(p) if p.controlled.contains(&id) => p.inflate_energy.map_or(true_energy, |f| true_energy * f),
            _ => true_energy,
        }
    }

    /// Phase 2 token passes for one attempt: running sum, average broadcast,
    /// private draws. Returns the record; the ring has stalled when
    /// `election_complete` is false and nothing was tampered with.
    pub fn phase2_elect(
        &mut self,
        ring: &Ring,
        attempt: u32,
        snapshot: &[f64],
        forced: Option<&BTreeSet<NodeId>>,
    ) -> Result<AttemptRecord> {
        let stream = self.stream(ring.cluster);
        let params = self.election_params(ring.len());
        let starter = ring.members[stream.starter_index(attempt, ring.len())];
        let reported: BTreeMap<NodeId, (f64, f64)> = ring
            .members
            .iter()
            .zip(snapshot)
            .map(|(&m, &e)| (m, (e, self.reported_energy(m, e))))
            .collect();
        for (&m, &(e, r)) in &reported {
            if e != r {
                self.insider_log.push(InsiderAction {
                    epoch: self.epoch,
                    cluster: ring.cluster,
                    node: m,
                    attempt,
                    true_energy: e,
                    reported_energy: r,
                });
            }
        }
        let mut rec = AttemptRecord { attempt, starter: Some(starter), ..Default::default() };
        let Some(right) = self.nodes[starter.index()].right_neighbor else {
            return Ok(rec);
        };
        let master = self.bs.master;
        let first = EnergyBody { pass: Pass::Sum, initiator: starter, value: reported[&starter].1, counter: 1 };
        let msg =
            frames::sealed(&mut self.nonces, MsgType::EnergyToken, starter, right, &link_key(&master, starter, right), &first.encode());
        self.net.send(msg);

        let dropper: BTreeSet<NodeId> = match &self.insider {
            Some(p) if p.drop_tokens => p.controlled.clone(),
            _ => BTreeSet::new(),
        };
        let mut bad = Vec::new();
        let Simulation { net, nodes, nonces, .. } = self;
        let decide = |rec: &mut AttemptRecord, nodes: &mut [NodeState], me: NodeId, e_avg: f64| -> Result<()> {
            let chance = phase2_chance(reported[&me].1, e_avg, params)?;
            nodes[me.index()].election_chance = chance;
            rec.chances.insert(me, chance);
            let elected = match forced {
                Some(f) => f.contains(&me),
                None => decide_role(stream.role_draw(attempt, me), chance),
            };
            if elected {
                rec.drawn.insert(me);
            }
            Ok(())
        };
        net.run_until_idle(|net, d| {
            let (MsgType::EnergyToken, Addr::Node(me), Addr::Node(from)) = (d.msg.msg_type, d.to, d.msg.sender) else {
                return Ok(());
            };
            if !ring.contains(me) {
                return Ok(());
            }
            let Some(body) = frames::open(&d.msg, &link_key(&master, from, me)).and_then(|b| EnergyBody::decode(&b))
            else {
                bad.push((d.t, d.t_sent, me));
                rec.tampered = true;
                return Ok(());
            };
            nodes[me.index()].left_neighbor = Some(from);
            if dropper.contains(&me) {
                return Ok(());
            }
            let Some(right) = nodes[me.index()].right_neighbor else { return Ok(()) };
            let next = match body.pass {
                Pass::Sum if me == body.initiator => {
                    let e_avg = body.value / body.counter as f64;
                    rec.e_sum = Some(body.value);
                    rec.counter = Some(body.counter);
                    rec.e_avg = Some(e_avg);
                    decide(&mut rec, nodes, me, e_avg)?;
                    Some(EnergyBody { pass: Pass::Broadcast, value: e_avg, ..body })
                }
                Pass::Sum => Some(EnergyBody {
                    value: body.value + reported.get(&me).map_or(0.0, |r| r.1),
                    counter: body.counter + 1,
                    ..body
                }),
                Pass::Broadcast if me == body.initiator => {
                    rec.election_complete = true;
                    None
                }
                Pass::Broadcast => {
                    decide(&mut rec, nodes, me, body.value)?;
                    Some(body)
                }
            };
            if let Some(b) = next {
                let m = frames::sealed(nonces, MsgType::EnergyToken, me, right, &link_key(&master, me, right), &b.encode());
                net.send(m);
            }
            Ok(())
        })?;
        for (t, t_sent, me) in bad {
            self.detect(t, t_sent, Addr::Node(me), DetectionKind::BadFrame { msg_type: MsgType::EnergyToken });
        }
        Ok(rec)
    }

    /// Phase 2 existence check: `rounds` parity circulations, each node
    /// announcing its private coin masked by the pads shared with both
    /// neighbours. Fills `rec.parities`.
    pub fn phase2_ensure(&mut self, ring: &Ring, rec: &mut AttemptRecord) -> Result<()> {
        let rounds = self.scenario.rounds;
        let stream = self.stream(ring.cluster);
        let attempt = rec.attempt;
        let Some(starter) = rec.starter else { return Ok(()) };
        let coins: BTreeMap<NodeId, Vec<bool>> =
            rec.drawn.iter().map(|&m| (m, stream.coins(attempt, m, rounds))).collect();
        let master = self.bs.master;
        let announce = |nodes: &[NodeState], me: NodeId, round: u32| -> Option<u8> {
            let n = &nodes[me.index()];
            let (left, right) = (n.left_neighbor?, n.right_neighbor?);
            let id = stream.pad_round(attempt, round);
            let pl = pad_derive(&master, me, left, id).ok()?;
            let pr = pad_derive(&master, me, right, id).ok()?;
            let bit = coins.get(&me).is_some_and(|c| c[round as usize]) as u8;
            Some(bit ^ (pl.0 & 1) as u8 ^ (pr.0 & 1) as u8)
        };
        let Some(a0) = announce(&self.nodes, starter, 0) else { return Ok(()) };
        let right = self.nodes[starter.index()].right_neighbor.expect("announce checked");
        let body = ParityBody { round: 0, acc: a0 }.encode();
        let msg = frames::sealed(&mut self.nonces, MsgType::ExistenceBit, starter, right, &link_key(&master, starter, right), &body);
        self.net.send(msg);

        let mut bad = Vec::new();
        let Simulation { net, nodes, nonces, .. } = self;
        net.run_until_idle(|net, d| {
            let (MsgType::ExistenceBit, Addr::Node(me), Addr::Node(from)) = (d.msg.msg_type, d.to, d.msg.sender) else {
                return Ok(());
            };
            if !ring.contains(me) {
                return Ok(());
            }
            let Some(body) = frames::open(&d.msg, &link_key(&master, from, me)).and_then(|b| ParityBody::decode(&b))
            else {
                bad.push((d.t, d.t_sent, me));
                rec.tampered = true;
                return Ok(());
            };
            let Some(right) = nodes[me.index()].right_neighbor else { return Ok(()) };
            let next = if me == starter {
                rec.parities.push(body.acc & 1 == 1);
                let round = body.round as u32 + 1;
                if round < rounds {
                    announce(nodes, me, round).map(|a| ParityBody { round: round as u16, acc: a })
                } else {
                    rec.existence_complete = true;
                    None
                }
            } else {
                announce(nodes, me, body.round as u32).map(|a| ParityBody { acc: body.acc ^ a, ..body })
            };
            if let Some(b) = next {
                let m = frames::sealed(nonces, MsgType::ExistenceBit, me, right, &link_key(&master, me, right), &b.encode());
                net.send(m);
            }
            Ok(())
        })?;
        for (t, t_sent, me) in bad {
            self.detect(t, t_sent, Addr::Node(me), DetectionKind::BadFrame { msg_type: MsgType::ExistenceBit });
        }
        Ok(())
    }

    /// Phase 3: readings summed around the ring from the starter, then the
    /// total circulated once more; aggregators keep it. Returns the total
    /// the starter computed, or `None` if the token never came back.
    pub fn phase3_aggregate(
        &mut self,
        ring: &Ring,
        starter: NodeId,
        readings: &BTreeMap<NodeId, u64>,
    ) -> Result<Option<u64>> {
        let range = self.scenario.reading_range;
        for &m in &ring.members {
            let v = *readings
                .get(&m)
                .ok_or_else(|| Error::InvalidParameter(format!("no reading for ring member {m}")))?;
            if !range.contains(v) {
                return Err(Error::InvalidReading { node: m, value: v, lo: range.lo, hi: range.hi });
            }
        }
        let master = self.bs.master;
        let Some(right) = self.nodes[starter.index()].right_neighbor else { return Ok(None) };
        let body = DataBody { pass: Pass::Sum, value: readings[&starter] }.encode();
        let msg = frames::sealed(&mut self.nonces, MsgType::DataToken, starter, right, &link_key(&master, starter, right), &body);
        self.net.send(msg);

        let mut total = None;
        let mut done = false;
        let mut bad = Vec::new();
        let leak = self.storage_ack_leak;
        let Simulation { net, nodes, nonces, .. } = self;
        net.run_until_idle(|net, d| {
            let (MsgType::DataToken, Addr::Node(me), Addr::Node(from)) = (d.msg.msg_type, d.to, d.msg.sender) else {
                return Ok(());
            };
            if !ring.contains(me) {
                return Ok(());
            }
            let Some(body) = frames::open(&d.msg, &link_key(&master, from, me)).and_then(|b| DataBody::decode(&b)) else {
                bad.push((d.t, d.t_sent, me));
                return Ok(());
            };
            let Some(right) = nodes[me.index()].right_neighbor else { return Ok(()) };
            let mut store = |net: &mut Network, nodes: &mut [NodeState], m: u64| {
                let node = &mut nodes[me.index()];
                if node.role == Role::Aggregator {
                    node.stored_aggregate = Some(m);
                    if leak {
                        let ack = frames::sealed(nonces, MsgType::DataToken, me, Addr::BaseStation, &node.pairwise_key.key, &[0; 9]);
                        net.send(ack);
                    }
                }
            };
            let next = match body.pass {
                Pass::Sum if me == starter => {
                    total = Some(body.value);
                    store(net, nodes, body.value);
                    Some(DataBody { pass: Pass::Broadcast, value: body.value })
                }
                Pass::Sum => Some(DataBody { value: body.value + readings[&me], ..body }),
                Pass::Broadcast if me == starter => {
                    done = true;
                    None
                }
                Pass::Broadcast => {
                    store(net, nodes, body.value);
                    Some(body)
                }
            };
            if let Some(b) = next {
                let m = frames::sealed(nonces, MsgType::DataToken, me, right, &link_key(&master, me, right), &b.encode());
                net.send(m);
            }
            Ok(())
        })?;
        for (t, t_sent, me) in bad {
            self.detect(t, t_sent, Addr::Node(me), DetectionKind::BadFrame { msg_type: MsgType::DataToken });
        }
        Ok(if done { total } else { None })
    }

    fn accept_chain_key(node: &mut NodeState, key: &Key, max_gap: usize) -> bool {
        if chain_verify(key, &node.last_chain_key, max_gap).is_some() {
            node.last_chain_key = *key;
            true
        } else {
            false
        }
    }

    /// Phase 4: the base station queries a uniformly chosen entry node with
    /// a fresh nonce and the epoch's chain key; the masked sum travels once
    /// around the ring and back up. Returns what the base station received.
    pub fn phase4_query(&mut self, ring: &Ring) -> Result<Option<QueryState>> {
        let (_, chain_key) =
            self.bs.epoch_key.ok_or_else(|| Error::ProtocolViolation("no chain key for this epoch".into()))?;
        let mut rng = ChaCha8Rng::from_seed(derive_seed(
            "query",
            &[self.scenario.seed, self.epoch as u64, ring.cluster.0 as u64],
        ));
        let entry = ring.members[rng.gen_range(0..ring.len())];
        let nonce: [u8; 16] = rng.gen();
        let body = QueryBody { nonce, chain_key, acc: 0 }.encode();
        let payload = frames::seal(&mut self.nonces, &self.bs.keys[entry.index()], &body);
        self.net.send(Message::new(MsgType::Query, Addr::BaseStation, entry, payload));

        let master = self.bs.master;
        let max_gap = self.scenario.max_gap;
        let mut started = false;
        let mut response = None;
        let mut alarms: Vec<(u64, u64, Addr, DetectionKind)> = Vec::new();
        let Simulation { net, nodes, nonces, bs, .. } = self;
        let share = |node: &NodeState, q: &[u8; 16]| -> MaskValue {
            mask_hash(q, &node.pairwise_key.key) + MaskValue(node.stored_aggregate.unwrap_or(0))
        };
        net.run_until_idle(|net, d| {
            match (d.msg.msg_type, d.to, d.msg.sender) {
                (MsgType::Query, Addr::Node(me), Addr::BaseStation) if me == entry => {
                    let node = &mut nodes[me.index()];
                    let Some(q) = frames::unseal(&node.pairwise_key.key, &d.msg.payload).and_then(|b| QueryBody::decode(&b))
                    else {
                        alarms.push((d.t, d.t_sent, d.to, DetectionKind::BadFrame { msg_type: MsgType::Query }));
                        return Ok(());
                    };
                    if !Self::accept_chain_key(node, &q.chain_key, max_gap) {
                        alarms.push((d.t, d.t_sent, d.to, DetectionKind::ChainRejected));
                        return Ok(());
                    }
                    if started {
                        return Ok(());
                    }
                    started = true;
                    let Some(right) = node.right_neighbor else { return Ok(()) };
                    let acc = share(node, &q.nonce);
                    let b = QueryBody { acc: acc.0, ..q }.encode();
                    net.send(frames::sealed(nonces, MsgType::Query, me, right, &link_key(&master, me, right), &b));
                }
                (MsgType::Query, Addr::Node(me), Addr::Node(from)) if ring.contains(me) => {
                    let Some(q) = frames::open(&d.msg, &link_key(&master, from, me)).and_then(|b| QueryBody::decode(&b))
                    else {
                        alarms.push((d.t, d.t_sent, d.to, DetectionKind::BadFrame { msg_type: MsgType::Query }));
                        return Ok(());
                    };
                    let node = &mut nodes[me.index()];
                    if node.last_chain_key != q.chain_key && !Self::accept_chain_key(node, &q.chain_key, max_gap) {
                        alarms.push((d.t, d.t_sent, d.to, DetectionKind::ChainRejected));
                        return Ok(());
                    }
                    if me == entry {
                        let b = ResponseBody { nonce: q.nonce, acc: q.acc }.encode();
                        let key = node.pairwise_key.key;
                        net.send(frames::sealed(nonces, MsgType::QueryResponse, me, Addr::BaseStation, &key, &b));
                        return Ok(());
                    }
                    let Some(right) = node.right_neighbor else { return Ok(()) };
                    let acc = MaskValue(q.acc) + share(node, &q.nonce);
                    let b = QueryBody { acc: acc.0, ..q }.encode();
                    net.send(frames::sealed(nonces, MsgType::Query, me, right, &link_key(&master, me, right), &b));
                }
                (MsgType::QueryResponse, Addr::BaseStation, Addr::Node(from)) if from == entry => {
                    match frames::open(&d.msg, &bs.keys[from.index()]).and_then(|b| ResponseBody::decode(&b)) {
                        Some(r) if r.nonce == nonce => {
                            response = Some(QueryState { nonce, accumulated: MaskValue(r.acc), entry });
                        }
                        _ => alarms.push((d.t, d.t_sent, d.to, DetectionKind::BadFrame { msg_type: MsgType::QueryResponse })),
                    }
                }
                _ => {}
            }
            Ok(())
        })?;
        for (t, t_sent, at, kind) in alarms {
            self.detect(t, t_sent, at, kind);
        }
        Ok(response)
    }

    /// Phases 2 to 4 for one ring.
    pub fn run_ring(&mut self, ring: &Ring, opts: &RingOptions) -> Result<RingOutcome> {
        let t0 = self.net.transcript().len();
        let ev0 = self.net.events().len();
        let snapshot: Vec<f64> = ring.members.iter().map(|&m| self.net.battery(m).remaining()).collect();
        let mut out = RingOutcome {
            cluster: ring.cluster,
            members: ring.members.clone(),
            snapshot: snapshot.clone(),
            params: self.election_params(ring.len()),
            attempts: Vec::new(),
            fallback: false,
            aggregators: Vec::new(),
            readings: Vec::new(),
            ring_total: None,
            query: None,
            recovered: None,
            recovery_error: None,
            messages: PhaseCounts::default(),
            stall: None,
            transcript: t0..t0,
        };
        let result = self.run_ring_inner(ring, opts, &snapshot, &mut out);
        if let Err(e) = result {
            match e {
                Error::NonTermination { .. } | Error::DeadRing(_) => {
                    let attempt = out.attempts.len().saturating_sub(1) as u32;
                    let phase = if out.ring_total.is_some() {
                        Phase::Query
                    } else if !out.aggregators.is_empty() {
                        Phase::Aggregation
                    } else {
                        Phase::Election
                    };
                    out.stall.get_or_insert(stall(phase, attempt, e.to_string(), None));
                }
                other => return Err(other),
            }
        }
        let t1 = self.net.transcript().len();
        out.transcript = t0..t1;
        out.messages = self.counts(t0..t1);
        if let Some(s) = out.stall.as_mut() {
            s.events = self.net.events()[ev0..].to_vec();
        }
        Ok(out)
    }

    fn run_ring_inner(
        &mut self,
        ring: &Ring,
        opts: &RingOptions,
        snapshot: &[f64],
        out: &mut RingOutcome,
    ) -> Result<()> {
        let retries = self.scenario.retries;
        let forced = opts.forced_roles.as_ref();
        let mut chosen: Option<(NodeId, BTreeSet<NodeId>)> = None;
        let mut last_complete: Option<(NodeId, BTreeSet<NodeId>)> = None;
        for attempt in 0..=retries {
            let mut rec = self.phase2_elect(ring, attempt, snapshot, forced)?;
            if rec.election_complete && !rec.tampered {
                self.phase2_ensure(ring, &mut rec)?;
            }
            let ok = rec.election_complete && rec.existence_complete && !rec.tampered;
            let found = rec.found_aggregator();
            let starter = rec.starter.expect("starter chosen");
            let drawn = rec.drawn.clone();
            let tampered = rec.tampered;
            out.attempts.push(rec);
            if ok {
                last_complete = Some((starter, drawn.clone()));
                if found {
                    chosen = Some((starter, drawn));
                    break;
                }
            } else if !tampered {
                let phase = if out.attempts.last().is_some_and(|r| r.election_complete) {
                    Phase::Existence
                } else {
                    Phase::Election
                };
                out.stall = Some(stall(phase, attempt, "token did not return to the starter", self.last_hop(ring)));
                return Ok(());
            }
        }
        let (starter, aggregators) = match (chosen, last_complete) {
            (Some(c), _) => c,
            (None, Some((starter, mut drawn))) => {
                out.fallback = true;
                drawn.insert(starter);
                (starter, drawn)
            }
            (None, None) => {
                out.stall = Some(stall(
                    Phase::Election,
                    retries,
                    "every attempt was tampered with",
                    self.last_hop(ring),
                ));
                return Ok(());
            }
        };
        for &m in &ring.members {
            self.nodes[m.index()].role = if aggregators.contains(&m) { Role::Aggregator } else { Role::Member };
        }
        out.aggregators = aggregators.iter().copied().collect();

        let readings: BTreeMap<NodeId, u64> = match &opts.readings {
            Some(r) => r.clone(),
            None => ring.members.iter().map(|&m| (m, self.reading(m))).collect(),
        };
        out.readings = ring.members.iter().map(|m| readings.get(m).copied().unwrap_or(0)).collect();
        let Some(total) = self.phase3_aggregate(ring, starter, &readings)? else {
            out.stall = Some(stall(Phase::Aggregation, 0, "data token did not return to the starter", self.last_hop(ring)));
            return Ok(());
        };
        out.ring_total = Some(total);
        for &a in &aggregators {
            self.net.charge_compute(a, self.scenario.energy.e_aggregator_round);
        }

        let Some(query) = self.phase4_query(ring)? else {
            out.stall = Some(stall(Phase::Query, 0, "no query response reached the base station", self.last_hop(ring)));
            return Ok(());
        };
        out.query = Some(query);
        let keys: Vec<Key> = ring.members.iter().map(|m| self.bs.keys[m.index()]).collect();
        match phase4_recover(&query, &keys, self.scenario.reading_range, ring.len() as u32) {
            Ok(r) => out.recovered = Some(r),
            Err(e) => out.recovery_error = Some(e.to_string()),
        }
        Ok(())
    }

    fn last_hop(&self, ring: &Ring) -> Option<(NodeId, NodeId)> {
        self.net.transcript().entries().iter().rev().find_map(|e| match (e.sender, e.receiver) {
            (Addr::Node(a), Addr::Node(b)) if ring.contains(a) && ring.contains(b) => Some((a, b)),
            _ => None,
        })
    }

    /// Broadcasts the epoch's chain key so nodes outside queried rings stay
    /// within the verification window.
    pub fn finish_epoch(&mut self) -> Result<()> {
        let Some((index, key)) = self.bs.epoch_key.take() else { return Ok(()) };
        self.net.send(Message::new(
            MsgType::KeyDisclosure,
            Addr::BaseStation,
            Addr::Broadcast,
            frames::encode_disclosure(index, &key),
        ));
        let max_gap = self.scenario.max_gap;
        let mut alarms = Vec::new();
        let nodes = &mut self.nodes;
        self.net.run_until_idle(|_, d| {
            let (MsgType::KeyDisclosure, Addr::Node(me), Addr::BaseStation) = (d.msg.msg_type, d.to, d.msg.sender) else {
                return Ok(());
            };
            let node = &mut nodes[me.index()];
            match frames::decode_disclosure(&d.msg.payload) {
                Some((_, k)) if k == node.last_chain_key => {}
                Some((_, k)) if Self::accept_chain_key(node, &k, max_gap) => {}
                _ => alarms.push((d.t, d.t_sent, me)),
            }
            Ok(())
        })?;
        for (t, t_sent, me) in alarms {
            self.detect(t, t_sent, Addr::Node(me), DetectionKind::ChainRejected);
        }
        Ok(())
    }

    /// One full epoch over every ring.
    pub fn run_epoch(&mut self) -> Result<EpochOutcome> {
        self.run_epoch_with(|_, _| {})
    }

    /// [`Simulation::run_epoch`] with a hook between setup and the rings.
    pub fn run_epoch_with(&mut self, after_setup: impl FnOnce(&mut Self, &SetupOutcome)) -> Result<EpochOutcome> {
        let t0 = self.net.transcript().len();
        let ev0 = self.net.events().len();
        let d0 = self.detections.len();
        let consumed0 = self.net.consumed();
        let alive_before: Vec<bool> = self.net.batteries().iter().map(Battery::is_alive).collect();
        let alive_start = self.net.alive_count();
        let setup = self.prepare_epoch()?;
        let halted = setup.rings.is_empty();
        after_setup(self, &setup);
        let mut rings = Vec::new();
        for ring in &setup.rings {
            rings.push(self.run_ring(ring, &RingOptions::default())?);
        }
        self.finish_epoch()?;
        let t1 = self.net.transcript().len();
        let deaths = alive_before
            .iter()
            .enumerate()
            .filter(|&(i, &was)| was && !self.net.is_alive(NodeId::from(i)))
            .map(|(i, _)| NodeId::from(i))
            .collect();
        Ok(EpochOutcome {
            epoch: self.epoch,
            halted,
            setup,
            rings,
            alive_start,
            alive_end: self.net.alive_count(),
            deaths,
            energy_consumed: self.net.consumed() - consumed0,
            messages: self.counts(t0..t1),
            transcript: t0..t1,
            events: ev0..self.net.events().len(),
            detections: d0..self.detections.len(),
        })
    }
}
