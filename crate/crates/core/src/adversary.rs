//! Adversary models and executable checkers for the six election
//! properties: termination, completeness, consistency, non-manipulability,
//! unpredictability and unidentifiability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{Addr, InterceptAction, Interception, Interceptor, Message, Metadata, MsgType, NetEvent, NodeId};
use crate::protocol::election::{aggregator_probabilities, phase2_chance, sample_election, token_average};
use crate::protocol::frames::EnergyBody;
use crate::protocol::{EpochOutcome, InsiderPolicy, RingOptions, Role, Simulation};
use crate::scenario::{Scenario, StopRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdversaryKind {
    Passive,
    Active,
    Compromised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TamperStrategy {
    None,
    InflateEnergy,
    DropToken,
    ReplayChainKey,
    ForgeRoleClaim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryModel {
    pub kind: AdversaryKind,
    pub controlled_nodes: BTreeSet<NodeId>,
    pub tamper_strategy: TamperStrategy,
    /// Number of frames an outside adversary tampers with per run.
    pub budget: u32,
    /// Factor a compromised node applies to its reported energy.
    pub inflation: f64,
}

impl AdversaryModel {
    pub fn passive() -> Self {
        Self {
            kind: AdversaryKind::Passive,
            controlled_nodes: BTreeSet::new(),
            tamper_strategy: TamperStrategy::None,
            budget: 0,
            inflation: 1.0,
        }
    }

    /// Outsider on the channel without any key material.
    pub fn active(strategy: TamperStrategy) -> Self {
        Self { kind: AdversaryKind::Active, tamper_strategy: strategy, budget: 1, ..Self::passive() }
    }

    /// Insider holding the keys of `nodes`.
    pub fn compromised(nodes: impl IntoIterator<Item = NodeId>, strategy: TamperStrategy) -> Self {
        Self {
            kind: AdversaryKind::Compromised,
            controlled_nodes: nodes.into_iter().collect(),
            tamper_strategy: strategy,
            budget: 0,
            inflation: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        match self.kind {
            AdversaryKind::Passive if !self.controlled_nodes.is_empty() || self.tamper_strategy != TamperStrategy::None => {
                bad("a passive adversary controls no nodes and does not tamper")
            }
            AdversaryKind::Active if !self.controlled_nodes.is_empty() => bad("an active outsider controls no nodes"),
            AdversaryKind::Active if self.tamper_strategy == TamperStrategy::None => {
                bad("an active adversary needs a tamper strategy")
            }
            AdversaryKind::Compromised if self.controlled_nodes.is_empty() => {
                bad("a compromised adversary controls at least one node")
            }
            AdversaryKind::Compromised
                if !matches!(self.tamper_strategy, TamperStrategy::InflateEnergy | TamperStrategy::DropToken) =>
            {
                bad("insiders support INFLATE_ENERGY and DROP_TOKEN")
            }
            AdversaryKind::Compromised if !(self.inflation >= 1.0 && self.inflation.is_finite()) => {
                bad("inflation factor must be >= 1")
            }
            _ => Ok(()),
        }
    }

    /// Wires the adversary into a simulation.
    pub fn install(&self, sim: &mut Simulation) -> Result<()> {
        self.validate()?;
        if let Some(&bad) = self.controlled_nodes.iter().find(|id| id.index() >= sim.nodes().len()) {
            return Err(Error::InvalidParameter(format!("controlled node {bad} does not exist")));
        }
        match self.kind {
            AdversaryKind::Passive => {}
            AdversaryKind::Active => {
                sim.set_interceptor(Some(Box::new(ChannelAdversary::new(self.tamper_strategy, self.budget))));
            }
            AdversaryKind::Compromised => sim.set_insider(Some(InsiderPolicy {
                controlled: self.controlled_nodes.clone(),
                inflate_energy: (self.tamper_strategy == TamperStrategy::InflateEnergy).then_some(self.inflation),
                drop_tokens: self.tamper_strategy == TamperStrategy::DropToken,
            })),
        }
        Ok(())
    }
}

/// Outside attacker: sees and rewrites frames but holds no keys.
#[derive(Clone, Debug)]
pub struct ChannelAdversary {
    strategy: TamperStrategy,
    remaining: u32,
    captured: Option<Message>,
}

impl ChannelAdversary {
    pub fn new(strategy: TamperStrategy, budget: u32) -> Self {
        Self { strategy, remaining: budget, captured: None }
    }
}

impl Interceptor for ChannelAdversary {
    fn on_air(&mut self, _t_sent: u64, msg: &mut Message) -> Interception {
        if self.remaining == 0 {
            return Interception::Pass;
        }
        match (self.strategy, msg.msg_type) {
            (TamperStrategy::InflateEnergy, MsgType::EnergyToken) => {
                // flip the exponent byte of the encrypted energy value
                let i = EnergyBody::VALUE_OFFSET + 7;
                match msg.payload.get_mut(i) {
                    Some(b) => {
                        *b ^= 0x01;
                        self.remaining -= 1;
                        Interception::Modified
                    }
                    None => Interception::Pass,
                }
            }
            (TamperStrategy::DropToken, MsgType::EnergyToken) => {
                self.remaining -= 1;
                Interception::Dropped
            }
            (TamperStrategy::ForgeRoleClaim, MsgType::ExistenceBit) => match msg.payload.last_mut() {
                Some(b) => {
                    *b ^= 0x01;
                    self.remaining -= 1;
                    Interception::Modified
                }
                None => Interception::Pass,
            },
            (TamperStrategy::ReplayChainKey, MsgType::Query) if msg.sender == Addr::BaseStation => {
                if self.captured.is_none() {
                    self.captured = Some(msg.clone());
                }
                Interception::Pass
            }
            _ => Interception::Pass,
        }
    }

    fn inject(&mut self) -> Vec<Message> {
        match (&self.captured, self.remaining) {
            (Some(m), r) if r > 0 && self.strategy == TamperStrategy::ReplayChainKey => {
                self.remaining -= 1;
                vec![m.clone()]
            }
            _ => Vec::new(),
        }
    }

    fn box_clone(&self) -> Box<dyn Interceptor> {
        Box::new(self.clone())
    }
}

/// A finished multi-epoch execution with everything the checkers need.
#[derive(Clone, Debug)]
pub struct Run {
    pub sim: Simulation,
    pub epochs: Vec<EpochOutcome>,
    /// Why the run ended before `scenario.epochs`, if it did.
    pub stop_reason: Option<String>,
}

impl Run {
    pub fn seed(&self) -> u64 {
        self.sim.scenario().seed
    }

    /// Runs up to `scenario.epochs` epochs under the scenario's stop rule.
    /// Fewer than three live nodes also ends the run. A setup failure in
    /// the first epoch is an error; in later epochs it ends the run.
    pub fn execute(scenario: &Scenario, adversary: Option<&AdversaryModel>) -> Result<Run> {
        scenario.validate()?;
        let mut sim = Simulation::new(scenario)?;
        if let Some(a) = adversary {
            a.install(&mut sim)?;
        }
        let mut epochs: Vec<EpochOutcome> = Vec::new();
        let mut stop_reason = None;
        let half = scenario.n.div_ceil(2);
        for e in 1..=scenario.epochs {
            let out = match sim.run_epoch() {
                Ok(out) => out,
                Err(err @ (Error::InvalidScenario(_) | Error::OrphanNodes(_))) if e > 1 => {
                    stop_reason = Some(format!("epoch {e}: {err}"));
                    break;
                }
                Err(err) => return Err(err),
            };
            let dead = scenario.n - out.alive_end;
            let (halted, died) = (out.halted, !out.deaths.is_empty());
            epochs.push(out);
            let reason = match scenario.stop {
                _ if halted => Some("fewer than three nodes alive"),
                StopRule::FirstDeath if died => Some("first node died"),
                StopRule::HalfDeath if dead >= half => Some("half the nodes died"),
                _ => None,
            };
            if let Some(r) = reason {
                if e < scenario.epochs {
                    stop_reason = Some(format!("epoch {e}: {r}"));
                }
                break;
            }
        }
        Ok(Run { sim, epochs, stop_reason })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Property {
    Termination,
    Completeness,
    Consistency,
    NonManipulability,
    Unpredictability,
    Unidentifiability,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub seed: u64,
    /// Human-readable counterexample lines; empty when the property holds.
    pub details: Vec<String>,
    pub stats: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyVerdict {
    pub property: Property,
    pub holds: bool,
    pub evidence: Evidence,
}

impl PropertyVerdict {
    fn new(property: Property, seed: u64, details: Vec<String>, stats: BTreeMap<String, f64>) -> Self {
        Self { property, holds: details.is_empty(), evidence: Evidence { seed, details, stats } }
    }
}

impl fmt::Display for PropertyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<20} {}", self.property.to_string(), if self.holds { "holds" } else { "FAILS" })?;
        for d in self.evidence.details.iter().take(5) {
            write!(f, "\n    {d}")?;
        }
        if self.evidence.details.len() > 5 {
            write!(f, "\n    ... {} more", self.evidence.details.len() - 5)?;
        }
        Ok(())
    }
}

fn describe_event(e: &NetEvent) -> Option<String> {
    Some(match e {
        NetEvent::NodeDied { t, node } => format!("node {node} died at t={t}"),
        NetEvent::Intercepted { t_sent, sender, receiver, msg_type, action: InterceptAction::Dropped, .. } => {
            format!("{msg_type:?} {sender} -> {receiver} sent at t={t_sent} was dropped in flight")
        }
        NetEvent::Undeliverable { t_sent, receiver, msg_type, .. } => {
            format!("{msg_type:?} sent at t={t_sent} could not be delivered to dead node {receiver}")
        }
        NetEvent::DeliveryFailure { t, sender, receiver, msg_type } => {
            format!("{msg_type:?} {sender} -> {receiver} at t={t} was out of range")
        }
        NetEvent::SenderDead { t, sender, msg_type } => format!("dead node {sender} could not send {msg_type:?} at t={t}"),
        _ => return None,
    })
}

/// Every phase finished, within its message budget.
pub fn check_termination(run: &Run) -> PropertyVerdict {
    let s = run.sim.scenario();
    let mut details = Vec::new();
    let mut total = 0u64;
    let mut worst = 0.0f64;
    for ep in &run.epochs {
        let setup_bound = (s.beacons() + 2 * s.n) as u64;
        if ep.setup.messages.setup > setup_bound {
            details.push(format!("epoch {}: setup used {} messages, bound {setup_bound}", ep.epoch, ep.setup.messages.setup));
        }
        if ep.messages.disclosure > 1 {
            details.push(format!("epoch {}: {} key disclosures", ep.epoch, ep.messages.disclosure));
        }
        for r in &ep.rings {
            let size = r.members.len() as u64;
            let attempts = r.attempts.len() as u64;
            total += r.messages.total();
            if let Some(st) = &r.stall {
                let hop = st.last_hop.map(|(a, b)| format!(", last hop {a} -> {b}")).unwrap_or_default();
                let mut line = format!(
                    "epoch {} ring {}: stalled in {:?} (attempt {}): {}{hop}",
                    ep.epoch, r.cluster, st.phase, st.attempt, st.reason
                );
                for e in st.events.iter().filter_map(describe_event) {
                    line.push_str("; ");
                    line.push_str(&e);
                }
                details.push(line);
                continue;
            }
            if attempts > 1 + s.retries as u64 {
                details.push(format!("epoch {} ring {}: {attempts} election attempts", ep.epoch, r.cluster));
            }
            let bounds = [
                ("election", r.messages.election, 2 * size * attempts),
                ("existence", r.messages.existence, s.rounds as u64 * size * attempts),
                ("aggregation", r.messages.aggregation, 2 * size),
                ("query", r.messages.query, size + 2),
            ];
            for (name, used, bound) in bounds {
                if bound > 0 {
                    worst = worst.max(used as f64 / bound as f64);
                }
                if used > bound {
                    details.push(format!(
                        "epoch {} ring {}: {name} used {used} messages, bound {bound}",
                        ep.epoch, r.cluster
                    ));
                }
            }
        }
    }
    let stats = BTreeMap::from([
        ("epochs".to_string(), run.epochs.len() as f64),
        ("ring_messages".to_string(), total as f64),
        ("max_budget_use".to_string(), worst),
    ]);
    PropertyVerdict::new(Property::Termination, run.seed(), details, stats)
}

/// Every node that took part ends each epoch with a role and a cluster.
pub fn check_completeness(run: &Run) -> PropertyVerdict {
    let mut details = Vec::new();
    for ep in &run.epochs {
        if !ep.setup.orphans.is_empty() {
            details.push(format!("epoch {}: orphan nodes without a cluster: {:?}", ep.epoch, ids(&ep.setup.orphans)));
        }
        for r in &ep.rings {
            if r.aggregators.is_empty() {
                details.push(format!(
                    "epoch {} ring {}: roles never assigned for {:?}",
                    ep.epoch,
                    r.cluster,
                    ids(&r.members)
                ));
            }
        }
    }
    if let Some(last) = run.epochs.last().filter(|e| !e.halted) {
        let assigned: BTreeSet<NodeId> =
            last.rings.iter().filter(|r| !r.aggregators.is_empty()).flat_map(|r| r.members.iter().copied()).collect();
        for n in run.sim.nodes() {
            if !assigned.contains(&n.id) {
                continue;
            }
            if n.role == Role::Unassigned || n.cluster_id.is_none() {
                details.push(format!(
                    "epoch {}: node {} ended with role {:?} and cluster {:?}",
                    last.epoch, n.id, n.role, n.cluster_id
                ));
            }
        }
    }
    let stats = BTreeMap::from([("epochs".to_string(), run.epochs.len() as f64)]);
    PropertyVerdict::new(Property::Completeness, run.seed(), details, stats)
}

fn ids(v: &[NodeId]) -> Vec<u32> {
    v.iter().map(|n| n.0).collect()
}

/// Ring-cycle integrity plus at least one aggregator per ring.
pub fn check_consistency(run: &Run) -> PropertyVerdict {
    let mut details = Vec::new();
    for ep in &run.epochs {
        for r in &ep.rings {
            if r.stall.is_none() && r.aggregators.is_empty() {
                details.push(format!("epoch {} ring {}: no aggregator", ep.epoch, r.cluster));
            }
        }
    }
    let mut clusters: BTreeMap<_, Vec<NodeId>> = BTreeMap::new();
    for n in run.sim.nodes() {
        if let Some(c) = n.cluster_id {
            clusters.entry(c).or_default().push(n.id);
        }
    }
    let epoch = run.sim.epoch();
    for (c, members) in &clusters {
        let set: BTreeSet<NodeId> = members.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut cycles: Vec<Vec<u32>> = Vec::new();
        let mut broken = Vec::new();
        for &start in members {
            if seen.contains(&start) {
                continue;
            }
            let mut path = vec![start];
            let mut cur = start;
            seen.insert(start);
            loop {
                match run.sim.node(cur).right_neighbor {
                    Some(next) if next == start => {
                        cycles.push(ids(&path));
                        break;
                    }
                    Some(next) if set.contains(&next) && !seen.contains(&next) => {
                        seen.insert(next);
                        path.push(next);
                        cur = next;
                    }
                    Some(next) if set.contains(&next) => {
                        // runs into an earlier path or a cycle not through start
                        let tail = path.iter().position(|&p| p == next).map(|i| ids(&path[i..]));
                        match tail {
                            Some(cyc) => cycles.push(cyc),
                            None => broken.push(format!("path {:?} merges into node {next}", ids(&path))),
                        }
                        break;
                    }
                    Some(next) => {
                        broken.push(format!("node {cur} points outside the cluster to {next}"));
                        break;
                    }
                    None => {
                        broken.push(format!("node {cur} has no right neighbour"));
                        break;
                    }
                }
            }
        }
        if cycles.len() != 1 || !broken.is_empty() || cycles[0].len() != members.len() {
            details.push(format!(
                "epoch {epoch} cluster {c}: right-neighbour edges form cycles {cycles:?} over {} members{}",
                members.len(),
                if broken.is_empty() { String::new() } else { format!("; {}", broken.join("; ")) }
            ));
        }
        let roles_assigned = members.iter().all(|&m| run.sim.node(m).role != Role::Unassigned);
        if roles_assigned && !members.iter().any(|&m| run.sim.node(m).role == Role::Aggregator) {
            details.push(format!("epoch {epoch} cluster {c}: no node holds the aggregator role"));
        }
    }
    let stats = BTreeMap::from([("clusters".to_string(), clusters.len() as f64)]);
    PropertyVerdict::new(Property::Consistency, run.seed(), details, stats)
}

/// Every channel tamper event paired with the detection it caused, and
/// every false alarm.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DetectionAudit {
    pub tampered: u32,
    pub detected: u32,
    pub dropped: u32,
    pub undetected: Vec<String>,
    pub false_alarms: Vec<String>,
}

impl DetectionAudit {
    pub fn sound(&self) -> bool {
        self.false_alarms.is_empty()
    }

    pub fn complete(&self) -> bool {
        self.undetected.is_empty()
    }
}

/// Matches detections to adversarial actions by the offending frame's
/// send time.
pub fn audit_detections(run: &Run) -> DetectionAudit {
    let mut audit = DetectionAudit::default();
    let mut acted: BTreeSet<u64> = BTreeSet::new();
    for e in run.sim.network().events() {
        match e {
            NetEvent::Intercepted { t_sent, action: InterceptAction::Modified, .. } => {
                audit.tampered += 1;
                acted.insert(*t_sent);
            }
            NetEvent::Intercepted { action: InterceptAction::Dropped, .. } => audit.dropped += 1,
            NetEvent::Injected { t, .. } => {
                audit.tampered += 1;
                acted.insert(*t);
            }
            _ => {}
        }
    }
    let detected: BTreeSet<u64> = run.sim.detections().iter().map(|d| d.t_sent).collect();
    for &t in &acted {
        if detected.contains(&t) {
            audit.detected += 1;
        } else {
            audit.undetected.push(format!("tampered frame sent at t={t} was accepted"));
        }
    }
    for d in run.sim.detections() {
        if !acted.contains(&d.t_sent) {
            audit.false_alarms.push(format!(
                "epoch {}: {:?} at {} for frame sent at t={} with no adversarial action",
                d.epoch, d.kind, d.at, d.t_sent
            ));
        }
    }
    audit
}

/// Compares a run under attack with the honest run of the same seed.
/// Holds iff every alteration was detected or left every honest node's
/// role and cluster unchanged.
pub fn check_nonmanipulability(honest: &Run, adversarial: &Run) -> PropertyVerdict {
    let mut details = Vec::new();
    let audit = audit_detections(adversarial);
    let controlled: BTreeSet<NodeId> = adversarial
        .sim
        .insider_log()
        .iter()
        .map(|a| a.node)
        .collect();
    let roles = |run: &Run| -> Vec<BTreeMap<NodeId, (bool, u32)>> {
        run.epochs
            .iter()
            .map(|ep| {
                ep.rings
                    .iter()
                    .flat_map(|r| r.members.iter().map(move |&m| (m, (r.aggregators.contains(&m), r.cluster.0))))
                    .collect()
            })
            .collect()
    };
    let (hr, ar) = (roles(honest), roles(adversarial));
    let mut changed = Vec::new();
    for (ep, (h, a)) in hr.iter().zip(&ar).enumerate() {
        for (node, hv) in h {
            if controlled.contains(node) {
                continue;
            }
            if a.get(node) != Some(hv) {
                changed.push(format!("epoch {}: honest node {node} role/cluster {hv:?} became {:?}", ep + 1, a.get(node)));
            }
        }
    }
    if !audit.undetected.is_empty() && !changed.is_empty() {
        details.extend(audit.undetected.iter().cloned());
        details.extend(changed.iter().cloned());
    }

    let mut stats = BTreeMap::new();
    stats.insert("channel_tampers".into(), audit.tampered as f64);
    stats.insert("detected".into(), audit.detected as f64);
    let mut max_shift = 0.0f64;
    for ep in &adversarial.epochs {
        for r in &ep.rings {
            for att in &r.attempts {
                for act in adversarial
                    .sim
                    .insider_log()
                    .iter()
                    .filter(|a| a.epoch == ep.epoch && a.cluster == r.cluster && a.attempt == att.attempt)
                {
                    if !r.members.contains(&act.node) {
                        continue;
                    }
                    let Some(starter) = att.starter.and_then(|s| r.members.iter().position(|&m| m == s)) else {
                        continue;
                    };
                    let n = r.members.len();
                    let (_, _, honest_avg) = token_average((0..n).map(|k| r.snapshot[(starter + k) % n]));
                    let Ok(honest_chance) = phase2_chance(act.true_energy, honest_avg, r.params) else { continue };
                    let Some(&claimed) = att.chances.get(&act.node) else { continue };
                    let shift = claimed - honest_chance;
                    max_shift = max_shift.max(shift);
                    if shift > 0.0 {
                        details.push(format!(
                            "epoch {} ring {} attempt {}: insider {} reported {:.6} J instead of {:.6} J, \
                             undetected; its chance rose from {honest_chance:.4} to {claimed:.4}",
                            ep.epoch, r.cluster, att.attempt, act.node, act.reported_energy, act.true_energy
                        ));
                    }
                }
            }
        }
    }
    stats.insert("insider_misreports".into(), adversarial.sim.insider_log().len() as f64);
    stats.insert("max_chance_shift".into(), max_shift);
    stats.insert("honest_role_changes".into(), changed.len() as f64);
    PropertyVerdict::new(Property::NonManipulability, adversarial.seed(), details, stats)
}

/// Per-ring election frequencies against the modelled probabilities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RingPredictability {
    pub members: Vec<NodeId>,
    pub model: Vec<f64>,
    pub frequency: Vec<f64>,
    pub guess: NodeId,
    pub guess_rate: f64,
    pub bound: f64,
}

pub fn predictability_profile(scenario: &Scenario, trials: u32) -> Result<Vec<RingPredictability>> {
    if trials < 1000 {
        return Err(Error::InvalidParameter(format!("unpredictability needs at least 1000 trials, got {trials}")));
    }
    let mut sim = Simulation::new(scenario)?;
    let setup = sim.prepare_epoch()?;
    let mut out = Vec::new();
    for ring in &setup.rings {
        let energies: Vec<f64> = ring.members.iter().map(|&m| sim.network().battery(m).remaining()).collect();
        let params = sim.election_params(ring.len());
        let n = ring.len();
        let mut counts = vec![0u32; n];
        for salt in 0..trials as u64 {
            sim.set_election_salt(salt);
            let ctx = sim.stream(ring.cluster);
            let d = sample_election(&ctx, &ring.members, &energies, params, scenario.rounds, scenario.retries, None)?;
            for a in d.aggregators {
                counts[ring.index_of(a).expect("member")] += 1;
            }
        }
        // the effective probability is averaged over starters, each giving its own E_avg
        let mut model = vec![0.0; n];
        for s in 0..n {
            let (_, _, avg) = token_average((0..n).map(|k| energies[(s + k) % n]));
            let chances: Vec<f64> = energies.iter().map(|&e| phase2_chance(e, avg, params)).collect::<Result<_>>()?;
            for (m, p) in model.iter_mut().zip(aggregator_probabilities(&chances, scenario.rounds, scenario.retries)) {
                *m += p / n as f64;
            }
        }
        let p_max = model.iter().cloned().fold(0.0, f64::max);
        let sigma = (p_max * (1.0 - p_max) / trials as f64).sqrt();
        let guess = ring.members[0];
        let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
        out.push(RingPredictability {
            members: ring.members.clone(),
            guess_rate: frequency[0],
            guess,
            model,
            frequency,
            bound: p_max + 3.0 * sigma,
        });
    }
    Ok(out)
}

/// Repeats the first epoch's elections `trials` times with fresh election
/// randomness. The passive adversary guesses the ring's founding beacon,
/// the natural choice knowing topology but not energies.
pub fn check_unpredictability(scenario: &Scenario, trials: u32) -> Result<PropertyVerdict> {
    let rings = predictability_profile(scenario, trials)?;
    let mut details = Vec::new();
    let mut worst_margin = f64::NEG_INFINITY;
    for r in &rings {
        if r.guess_rate > r.bound {
            details.push(format!(
                "ring {:?}: fixed guess {} succeeded in {:.4} of trials, bound {:.4}",
                ids(&r.members),
                r.guess,
                r.guess_rate,
                r.bound
            ));
        }
        for (m, f) in r.members.iter().zip(&r.frequency) {
            worst_margin = worst_margin.max(f - r.bound);
            if *f > r.bound {
                details.push(format!(
                    "ring {:?}: node {m} elected in {f:.4} of {trials} trials, bound {:.4}",
                    ids(&r.members),
                    r.bound
                ));
            }
        }
    }
    let mut stats = BTreeMap::from([("rings".to_string(), rings.len() as f64), ("trials".to_string(), trials as f64)]);
    if worst_margin.is_finite() {
        stats.insert("worst_margin".into(), worst_margin);
    }
    Ok(PropertyVerdict::new(Property::Unpredictability, scenario.seed, details, stats))
}

/// Aggregator assignments tried per ring: every non-empty subset for small
/// rings, otherwise each single node plus the whole ring.
pub fn assignments(members: &[NodeId]) -> Vec<BTreeSet<NodeId>> {
    let n = members.len();
    if n <= 5 {
        (1u32..(1 << n))
            .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| members[i]).collect())
            .collect()
    } else {
        let mut v: Vec<BTreeSet<NodeId>> = members.iter().map(|&m| BTreeSet::from([m])).collect();
        v.push(members.iter().copied().collect());
        v
    }
}

/// First position where two metadata sequences differ.
pub fn first_divergence(a: &[Metadata], b: &[Metadata]) -> Option<usize> {
    let common = a.len().min(b.len());
    (0..common).find(|&i| a[i] != b[i]).or((a.len() != b.len()).then_some(common))
}

/// Runs the first epoch's rings once per forced aggregator assignment,
/// with every other source of randomness fixed, and compares transcripts.
pub fn check_unidentifiability(scenario: &Scenario) -> Result<PropertyVerdict> {
    check_unidentifiability_with(scenario, |_| {})
}

/// [`check_unidentifiability`] with a hook to alter the simulation first.
pub fn check_unidentifiability_with(scenario: &Scenario, configure: impl Fn(&mut Simulation)) -> Result<PropertyVerdict> {
    let mut base = Simulation::new(scenario)?;
    configure(&mut base);
    let setup = base.prepare_epoch()?;
    let mut details = Vec::new();
    let mut compared = 0usize;
    for ring in &setup.rings {
        let mut reference: Option<(BTreeSet<NodeId>, Vec<Metadata>)> = None;
        for forced in assignments(&ring.members) {
            let mut sim = base.clone();
            let opts = RingOptions { forced_roles: Some(forced.clone()), readings: None };
            let out = sim.run_ring(ring, &opts)?;
            let meta = sim.network().transcript().metadata(out.transcript.clone());
            compared += 1;
            match &reference {
                None => reference = Some((forced, meta)),
                Some((ref_set, ref_meta)) => {
                    if let Some(i) = first_divergence(ref_meta, &meta) {
                        details.push(format!(
                            "ring {}: aggregators {:?} and {:?} diverge at frame {i}: {:?} vs {:?}",
                            ring.cluster,
                            ids(&ref_set.iter().copied().collect::<Vec<_>>()),
                            ids(&forced.iter().copied().collect::<Vec<_>>()),
                            ref_meta.get(i),
                            meta.get(i)
                        ));
                    }
                }
            }
        }
    }
    let stats = BTreeMap::from([
        ("rings".to_string(), setup.rings.len() as f64),
        ("assignments".to_string(), compared as f64),
    ]);
    Ok(PropertyVerdict::new(Property::Unidentifiability, scenario.seed, details, stats))
}

/// Trials used for unpredictability when running the full suite.
pub const DEFAULT_TRIALS: u32 = 1000;

/// Runs all six checkers on an honest execution of `scenario`.
pub fn verify_all(scenario: &Scenario) -> Result<Vec<PropertyVerdict>> {
    let run = Run::execute(scenario, None)?;
    Ok(vec![
        check_termination(&run),
        check_completeness(&run),
        check_consistency(&run),
        check_nonmanipulability(&run, &run),
        check_unpredictability(scenario, DEFAULT_TRIALS)?,
        check_unidentifiability(scenario)?,
    ])
}
