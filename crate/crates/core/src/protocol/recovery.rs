//! Base-station side of masked collection: strip the per-node hashes and
//! find the unique aggregator count that explains the residue.

use serde::{Deserialize, Serialize};

use crate::crypto::{mask_hash, Key, MaskValue};
use crate::error::{Error, Result};

use super::QueryState;

/// Inclusive per-node bounds on integer sensor readings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u64; 2]", into = "[u64; 2]")]
pub struct ReadingRange {
    pub lo: u64,
    pub hi: u64,
}

impl From<[u64; 2]> for ReadingRange {
    fn from([lo, hi]: [u64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<ReadingRange> for [u64; 2] {
    fn from(r: ReadingRange) -> Self {
        [r.lo, r.hi]
    }
}

impl ReadingRange {
    pub fn new(lo: u64, hi: u64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidParameter(format!("reading range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: u64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    /// Bounds on the ring total `M` for `ring_size` honest readings.
    pub fn ring_bounds(&self, ring_size: u32) -> (u64, u64) {
        (self.lo * ring_size as u64, self.hi * ring_size as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Number of aggregators in the ring.
    pub c: u32,
    /// Ring total of readings.
    pub m: u64,
}

/// Every `(c, M)` with `c * M == residue`, `1 <= c <= ring_size` and `M` in
/// the ring bounds.
pub fn candidates(residue: u64, range: ReadingRange, ring_size: u32) -> Vec<(u32, u64)> {
    let (lo, hi) = range.ring_bounds(ring_size);
    (1..=ring_size)
        .filter(|&c| residue.is_multiple_of(c as u64))
        .map(|c| (c, residue / c as u64))
        .filter(|&(_, m)| (lo..=hi).contains(&m))
        .collect()
}

pub fn recover_from_residue(residue: MaskValue, range: ReadingRange, ring_size: u32) -> Result<RecoveryResult> {
    let found = candidates(residue.0, range, ring_size);
    match found.as_slice() {
        [] => Err(Error::ProtocolViolation(format!(
            "residue {} matches no aggregator count in 1..={ring_size}",
            residue.0
        ))),
        [(c, m)] => Ok(RecoveryResult { c: *c, m: *m }),
        _ => Err(Error::Ambiguity { residue: residue.0, candidates: found }),
    }
}

/// Residue left once every member's `h(Q | k_i)` is subtracted.
pub fn residue(query: &QueryState, ring_keys: &[Key]) -> MaskValue {
    ring_keys.iter().fold(query.accumulated, |acc, k| acc - mask_hash(&query.nonce, k))
}

pub fn phase4_recover(
    query: &QueryState,
    ring_keys: &[Key],
    range: ReadingRange,
    ring_size: u32,
) -> Result<RecoveryResult> {
    recover_from_residue(residue(query, ring_keys), range, ring_size)
}

/// Two distinct explanations of one residue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ambiguous {
    pub c: u32,
    pub m: u64,
    pub c_alt: u32,
    pub m_alt: u64,
}

/// Looks for `c < c'` and ring totals `m, m'` in range with `c*m == c'*m'`.
///
/// With `g = gcd(c, c')` every solution is `m = (c'/g)·t`, `m' = (c/g)·t`,
/// so it is enough to test the smallest admissible `t`.
pub fn find_ambiguity(range: ReadingRange, ring_size: u32) -> Option<Ambiguous> {
    let (lo, hi) = range.ring_bounds(ring_size);
    for c in 1..=ring_size as u64 {
        for c_alt in c + 1..=ring_size as u64 {
            let g = gcd(c, c_alt);
            let (small, large) = (c / g, c_alt / g);
            let t = lo.div_ceil(small);
            if large.checked_mul(t).is_some_and(|m| m <= hi) {
                return Some(Ambiguous { c: c as u32, m: large * t, c_alt: c_alt as u32, m_alt: small * t });
            }
        }
    }
    None
}

/// Rejects reading ranges that admit an ambiguous residue for any ring size
/// in `3..=max_ring`, or whose masked sums could exceed 2^32.
pub fn validate_range(range: ReadingRange, max_ring: u32) -> Result<()> {
    let cap = (max_ring as u128).pow(2) * range.hi as u128;
    if cap >= 1u128 << 32 {
        return Err(Error::InvalidScenario(format!(
            "reading range {:?} with rings up to {max_ring} can exceed 2^32",
            [range.lo, range.hi]
        )));
    }
    for s in 3..=max_ring {
        if let Some(a) = find_ambiguity(range, s) {
            return Err(Error::InvalidScenario(format!(
                "reading range [{}, {}] is ambiguous for ring size {s}: {}x{} = {}x{}",
                range.lo, range.hi, a.c, a.m, a.c_alt, a.m_alt
            )));
        }
    }
    Ok(())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(lo: u64, hi: u64) -> ReadingRange {
        ReadingRange::new(lo, hi).unwrap()
    }

    #[test]
    fn unique_residue_recovered() {
        // ring of 10, readings [10,12] → M in [100,120]; 330 = 3·110 only.
        let r = recover_from_residue(MaskValue(330), range(10, 12), 10).unwrap();
        assert_eq!(r, RecoveryResult { c: 3, m: 110 });
    }

    #[test]
    fn ambiguous_residue_raises() {
        // M in [100,200]: 600 = 3·200 = 4·150 = 5·120 = 6·100
        match recover_from_residue(MaskValue(600), range(10, 20), 10) {
            Err(Error::Ambiguity { candidates, .. }) => {
                assert_eq!(candidates, vec![(3, 200), (4, 150), (5, 120), (6, 100)]);
            }
            other => panic!("expected ambiguity, got {other:?}"),
        }
    }

    #[test]
    fn zero_residue_is_violation() {
        assert!(matches!(
            recover_from_residue(MaskValue(0), range(10, 12), 10),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn ambiguity_search_matches_enumeration() {
        for (lo, hi) in [(10, 12), (1, 1), (0, 3), (1000, 1020), (7, 9), (10, 20)] {
            let r = range(lo, hi);
            for s in 1..=12u32 {
                let (a, b) = r.ring_bounds(s);
                let mut brute = false;
                'outer: for c in 1..=s as u64 {
                    for m in a..=b {
                        for c2 in 1..=s as u64 {
                            if c2 != c && (c * m) % c2 == 0 && (a..=b).contains(&(c * m / c2)) {
                                brute = true;
                                break 'outer;
                            }
                        }
                    }
                }
                let fast = find_ambiguity(r, s);
                assert_eq!(fast.is_some(), brute, "range {lo}..{hi} size {s}");
                if let Some(x) = fast {
                    assert_eq!(x.c as u64 * x.m, x.c_alt as u64 * x.m_alt);
                    assert!((a..=b).contains(&x.m) && (a..=b).contains(&x.m_alt));
                }
            }
        }
    }

    #[test]
    fn validation() {
        assert!(validate_range(range(10, 12), 5).is_ok());
        assert!(validate_range(range(10, 12), 6).is_err());
        assert!(validate_range(range(1000, 1020), 48).is_ok());
        assert!(validate_range(range(1000, 1020), 60).is_err());
        assert!(validate_range(range(1, 1 << 30), 4).is_err());
    }
}
