//! Cluster formation and ring construction decisions.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::derive_seed;
use crate::error::{Error, Result};
use crate::netsim::{rssi, Deployment, NodeId, Point};

use super::ClusterId;

/// Transmit power used for beacon strength comparisons.
pub const BEACON_POWER: f64 = 1.0;

/// Picks `k` distinct beacons uniformly among `alive`; result is sorted.
pub fn choose_beacons(alive: &[NodeId], k: usize, seed: u64, epoch: u32) -> Vec<NodeId> {
    let mut rng = ChaCha8Rng::from_seed(derive_seed("beacons", &[seed, epoch as u64]));
    let k = k.min(alive.len());
    let mut picked: Vec<NodeId> = sample(&mut rng, alive.len(), k).into_iter().map(|i| alive[i]).collect();
    picked.sort();
    picked
}

/// Strongest beacon heard by `node`; ties go to the lower beacon id.
/// A beacon always belongs to its own cluster.
pub fn best_beacon(dep: &Deployment, radius: f64, node: NodeId, beacons: &[NodeId]) -> Option<NodeId> {
    if beacons.contains(&node) {
        return Some(node);
    }
    let mut best: Option<(f64, NodeId)> = None;
    for &b in beacons {
        if dep.distance(b, node) > radius {
            continue;
        }
        let s = rssi(dep, b, node, BEACON_POWER).expect("beacon differs from node");
        if best.is_none_or(|(bs, bid)| s > bs || (s == bs && b < bid)) {
            best = Some((s, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Assigns every node in `nodes` to a beacon. Returns the assignment and
/// the nodes no beacon reached.
pub fn assign(
    dep: &Deployment,
    radius: f64,
    beacons: &[NodeId],
    nodes: &[NodeId],
) -> (BTreeMap<NodeId, ClusterId>, Vec<NodeId>) {
    let mut map = BTreeMap::new();
    let mut orphans = Vec::new();
    for &n in nodes {
        match best_beacon(dep, radius, n, beacons) {
            Some(b) => {
                map.insert(n, ClusterId(b.0));
            }
            None => orphans.push(n),
        }
    }
    (map, orphans)
}

/// Beacon selection plus assignment for a fully alive deployment.
pub fn phase1_cluster(dep: &Deployment, radius: f64, k: usize, seed: u64) -> Result<BTreeMap<NodeId, ClusterId>> {
    if k == 0 || k > dep.len() {
        return Err(Error::InvalidParameter(format!("k_beacons must be in 1..={}, got {k}", dep.len())));
    }
    let all: Vec<NodeId> = dep.node_ids().collect();
    let beacons = choose_beacons(&all, k, seed, 1);
    let (map, orphans) = assign(dep, radius, &beacons, &all);
    if orphans.is_empty() {
        Ok(map)
    } else {
        Err(Error::OrphanNodes(orphans))
    }
}

fn centroid(members: &[NodeId], pos: &impl Fn(NodeId) -> Point) -> Point {
    let n = members.len() as f64;
    let (x, y) = members.iter().fold((0.0, 0.0), |(x, y), &m| {
        let p = pos(m);
        (x + p.x, y + p.y)
    });
    Point::new(x / n, y / n)
}

/// Folds clusters with fewer than 3 members into the cluster with the
/// nearest centroid (ties to the lower id), smallest first.
pub fn merge_small_clusters(
    mut clusters: BTreeMap<ClusterId, Vec<NodeId>>,
    pos: impl Fn(NodeId) -> Point,
) -> Result<BTreeMap<ClusterId, Vec<NodeId>>> {
    loop {
        let Some((&small, _)) = clusters.iter().filter(|(_, m)| m.len() < 3).min_by_key(|(id, m)| (m.len(), **id))
        else {
            return Ok(clusters);
        };
        if clusters.len() == 1 {
            return Err(Error::InvalidScenario(format!(
                "only {} reachable nodes, a ring needs at least 3",
                clusters[&small].len()
            )));
        }
        let moved = clusters.remove(&small).expect("present");
        let from = centroid(&moved, &pos);
        let target = clusters
            .iter()
            .map(|(&id, m)| (centroid(m, &pos).distance(&from), id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
            .expect("another cluster exists");
        let members = clusters.get_mut(&target).expect("present");
        members.extend(moved);
        members.sort();
    }
}

/// Greedy nearest-neighbour tour over `members` starting at `start`;
/// ties go to the lower id. The returned order defines right neighbours.
pub fn phase1_ring(members: &[(NodeId, Point)], start: NodeId) -> Result<Vec<NodeId>> {
    if members.len() < 3 {
        return Err(Error::InvalidScenario(format!("ring needs at least 3 members, got {}", members.len())));
    }
    let mut left: Vec<(NodeId, Point)> = members.to_vec();
    left.sort_by_key(|m| m.0);
    let first = left.iter().position(|m| m.0 == start).unwrap_or(0);
    let mut cur = left.remove(first);
    let mut order = vec![cur.0];
    while !left.is_empty() {
        let next = left
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.1.distance(&cur.1).total_cmp(&b.1.distance(&cur.1)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("non-empty");
        cur = left.remove(next);
        order.push(cur.0);
    }
    Ok(order)
}
