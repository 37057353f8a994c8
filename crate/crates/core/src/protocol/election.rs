//! Energy-aware election math and the node-local random decisions.
//!
//! The message-level election in [`super::Simulation`] and the transport-free
//! [`sample_election`] share every decision function here, so both produce
//! the same roles for the same randomness.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::derive_seed;
use crate::error::{Error, Result};
use crate::netsim::NodeId;

use super::ClusterId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectionParams {
    pub p_base: f64,
    pub beta: f64,
}

impl ElectionParams {
    /// `p_base` defaults to `target / ring_size`, capped at 1.
    pub fn for_ring(p_base: Option<f64>, target_aggregators: f64, beta: f64, ring_size: usize) -> Self {
        let p_base = p_base.unwrap_or(target_aggregators / ring_size as f64).clamp(0.0, 1.0);
        Self { p_base, beta }
    }
}

/// `clamp(p_base · (1 + beta · (e_i − E_avg) / E_avg), 0, 1)`.
pub fn phase2_chance(e_i: f64, e_avg: f64, params: ElectionParams) -> Result<f64> {
    if !(e_avg > 0.0) {
        return Err(Error::DeadRing(e_avg));
    }
    let p = params.p_base * (1.0 + params.beta * (e_i - e_avg) / e_avg);
    Ok(p.clamp(0.0, 1.0))
}

/// Identifies one ring election for the purpose of deriving randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamCtx {
    pub seed: u64,
    /// Varies election randomness without touching anything else.
    pub salt: u64,
    pub epoch: u32,
    pub cluster: ClusterId,
}

impl StreamCtx {
    fn rng(&self, label: &str, extra: &[u64]) -> ChaCha8Rng {
        let mut ctx = vec![self.seed, self.salt, self.epoch as u64, self.cluster.0 as u64];
        ctx.extend_from_slice(extra);
        ChaCha8Rng::from_seed(derive_seed(label, &ctx))
    }

    pub fn starter_index(&self, attempt: u32, ring_size: usize) -> usize {
        self.rng("starter", &[attempt as u64]).gen_range(0..ring_size)
    }

    /// Uniform draw in `[0, 1)` compared against the node's chance.
    pub fn role_draw(&self, attempt: u32, node: NodeId) -> f64 {
        self.rng("role", &[attempt as u64, node.0 as u64]).gen::<f64>()
    }

    /// Fresh fair coins an aggregator announces in the parity rounds.
    pub fn coins(&self, attempt: u32, node: NodeId, rounds: u32) -> Vec<bool> {
        let mut rng = self.rng("coin", &[attempt as u64, node.0 as u64]);
        (0..rounds).map(|_| rng.gen::<bool>()).collect()
    }

    /// Round identifier mixed into the neighbour pads.
    pub fn pad_round(&self, attempt: u32, round: u32) -> u64 {
        ((self.epoch as u64) << 32) | ((attempt as u64 & 0xffff) << 16) | (round as u64 & 0xffff)
    }
}

pub fn decide_role(draw: f64, chance: f64) -> bool {
    draw < chance
}

/// Running sum in ring order starting at the starter, as the token computes it.
pub fn token_average(energies_from_starter: impl IntoIterator<Item = f64>) -> (f64, u32, f64) {
    let (sum, counter) = energies_from_starter.into_iter().fold((0.0, 0u32), |(s, c), e| (s + e, c + 1));
    (sum, counter, sum / counter as f64)
}

/// Probability that each node ends the election holding the aggregator
/// role, including parity false negatives, reruns and the starter fallback.
///
/// `chances[i]` is node i's per-attempt chance; the starter is uniform.
pub fn aggregator_probabilities(chances: &[f64], rounds: u32, retries: u32) -> Vec<f64> {
    let n = chances.len() as f64;
    let miss = 0.5f64.powi(rounds as i32);
    let p0: f64 = chances.iter().map(|p| 1.0 - p).product();
    // probability an attempt ends without a detected aggregator
    let q = p0 + (1.0 - p0) * miss;
    let reruns: f64 = (0..retries).map(|a| q.powi(a as i32)).sum();
    let last = q.powi(retries as i32);
    chances
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let others_none: f64 =
                chances.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, pj)| 1.0 - pj).product();
            let undetected_without_me = (1.0 - p) * (others_none + (1.0 - others_none) * miss);
            p * (1.0 - miss) * reruns + last * (p + undetected_without_me / n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElectionDraw {
    pub starter: NodeId,
    pub attempts: u32,
    pub aggregators: BTreeSet<NodeId>,
    pub fallback: bool,
    pub e_avg: f64,
}

/// Runs the election decisions without any transport: token average,
/// private draws, parity rounds (pads cancel, so only the XOR of private
/// bits matters), reruns and fallback.
pub fn sample_election(
    ctx: &StreamCtx,
    members: &[NodeId],
    energies: &[f64],
    params: ElectionParams,
    rounds: u32,
    retries: u32,
    forced: Option<&BTreeSet<NodeId>>,
) -> Result<ElectionDraw> {
    let n = members.len();
    if n == 0 || energies.len() != n {
        return Err(Error::InvalidParameter("ring members and energies must be non-empty and aligned".into()));
    }
    let mut last = None;
    for attempt in 0..=retries {
        let s = ctx.starter_index(attempt, n);
        let (_, _, e_avg) = token_average((0..n).map(|k| energies[(s + k) % n]));
        let mut aggregators = BTreeSet::new();
        for (i, &node) in members.iter().enumerate() {
            let elected = match forced {
                Some(f) => f.contains(&node),
                None => decide_role(ctx.role_draw(attempt, node), phase2_chance(energies[i], e_avg, params)?),
            };
            if elected {
                aggregators.insert(node);
            }
        }
        let mut parity = vec![false; rounds as usize];
        for &node in &aggregators {
            for (p, c) in parity.iter_mut().zip(ctx.coins(attempt, node, rounds)) {
                *p ^= c;
            }
        }
        let draw = ElectionDraw { starter: members[s], attempts: attempt + 1, aggregators, fallback: false, e_avg };
        if parity.iter().any(|&p| p) {
            return Ok(draw);
        }
        last = Some(draw);
    }
    let mut draw = last.expect("at least one attempt");
    draw.aggregators.insert(draw.starter);
    draw.fallback = true;
    Ok(draw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(p: f64, beta: f64) -> ElectionParams {
        ElectionParams { p_base: p, beta }
    }

    #[test]
    fn chance_examples() {
        let p = params(0.2, 1.0);
        assert_eq!(phase2_chance(4.0, 4.0, p).unwrap(), 0.2);
        assert!((phase2_chance(8.0, 4.0, p).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(phase2_chance(0.0, 4.0, p).unwrap(), 0.0);
        assert!(matches!(phase2_chance(1.0, 0.0, p), Err(Error::DeadRing(_))));
    }

    #[test]
    fn default_p_base() {
        let p = ElectionParams::for_ring(None, 1.0, 1.0, 5);
        assert_eq!(p.p_base, 0.2);
        assert_eq!(ElectionParams::for_ring(None, 9.0, 1.0, 5).p_base, 1.0);
        assert_eq!(ElectionParams::for_ring(Some(0.3), 1.0, 1.0, 5).p_base, 0.3);
    }

    #[test]
    fn token_average_example() {
        let (sum, counter, avg) = token_average([2.0, 4.0, 6.0]);
        assert_eq!((sum, counter, avg), (12.0, 3, 4.0));
    }

    #[test]
    fn argmax_never_loses() {
        let p = params(0.25, 1.5);
        let energies = [0.3, 0.9, 0.5, 0.1];
        let (_, _, avg) = token_average(energies);
        let chances: Vec<f64> = energies.iter().map(|&e| phase2_chance(e, avg, p).unwrap()).collect();
        let top = chances[1];
        assert!(chances.iter().all(|&c| c <= top));
    }

    #[test]
    fn probabilities_sum_sensibly() {
        let probs = aggregator_probabilities(&[0.2; 5], 20, 3);
        assert!(probs.iter().all(|&p| (p - probs[0]).abs() < 1e-15));
        // at least one aggregator is guaranteed, so the expected count is >= 1
        assert!(probs.iter().sum::<f64>() >= 1.0);
        let zero = aggregator_probabilities(&[0.0; 4], 20, 3);
        assert!(zero.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn probability_model_matches_monte_carlo() {
        // Oracle: plain simulation of draws, fair-coin detection, reruns, fallback.
        let chances = [0.1, 0.5, 0.3];
        let rounds = 2;
        let retries = 2;
        let model = aggregator_probabilities(&chances, rounds, retries);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 200_000;
        let mut counts = [0u32; 3];
        for _ in 0..trials {
            let mut final_roles = [false; 3];
            let mut done = false;
            let mut starter = 0;
            for _ in 0..=retries {
                starter = rng.gen_range(0..3);
                let roles: Vec<bool> = chances.iter().map(|&p| rng.gen::<f64>() < p).collect();
                let c = roles.iter().filter(|&&r| r).count();
                let detected = c > 0 && (0..rounds).any(|_| rng.gen::<bool>());
                final_roles.copy_from_slice(&roles);
                if detected {
                    done = true;
                    break;
                }
            }
            if !done {
                final_roles[starter] = true;
            }
            for i in 0..3 {
                counts[i] += final_roles[i] as u32;
            }
        }
        for i in 0..3 {
            let f = counts[i] as f64 / trials as f64;
            let sigma = (model[i] * (1.0 - model[i]) / trials as f64).sqrt();
            assert!((f - model[i]).abs() < 4.0 * sigma, "node {i}: {f} vs {}", model[i]);
        }
    }

    #[test]
    fn sampler_favours_high_energy() {
        // energies [1,1,1,1,6], beta 1: E_avg = 2 so chances are 0.1 ×4 and 0.6.
        let members: Vec<NodeId> = (0..5).map(NodeId).collect();
        let energies = [1.0, 1.0, 1.0, 1.0, 6.0];
        let p = params(0.2, 1.0);
        let mut counts = [0u32; 5];
        for salt in 0..10_000 {
            let ctx = StreamCtx { seed: 7, salt, epoch: 1, cluster: ClusterId(0) };
            let d = sample_election(&ctx, &members, &energies, p, 20, 3, None).unwrap();
            for a in d.aggregators {
                counts[a.index()] += 1;
            }
        }
        assert!(counts[..4].iter().all(|&c| c < counts[4]), "{counts:?}");
    }

    #[test]
    fn forced_empty_falls_back_to_starter() {
        let members: Vec<NodeId> = (0..4).map(NodeId).collect();
        let none = BTreeSet::new();
        for salt in 0..50 {
            let ctx = StreamCtx { seed: 1, salt, epoch: 1, cluster: ClusterId(0) };
            let d = sample_election(&ctx, &members, &[1.0; 4], params(0.25, 1.0), 20, 3, Some(&none)).unwrap();
            assert!(d.fallback);
            assert_eq!(d.attempts, 4);
            assert_eq!(d.aggregators, BTreeSet::from([d.starter]));
        }
    }
}
