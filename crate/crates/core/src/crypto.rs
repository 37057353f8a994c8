//! Stateless cryptographic kernel.
//!
//! Every primitive here is built on SHA-256 with a one-byte domain tag in
//! front of the input, so the chain function, the MAC, the masking hash and
//! the key derivations can never collide with each other.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netsim::NodeId;

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;

pub type Key = [u8; KEY_LEN];
pub type Tag = [u8; TAG_LEN];

/// Domain separation tags.
mod domain {
    pub const CHAIN: u8 = 0x01;
    pub const MAC: u8 = 0x02;
    pub const MASK: u8 = 0x03;
    pub const PAD: u8 = 0x04;
    pub const PAIRWISE: u8 = 0x05;
    pub const LINK: u8 = 0x06;
    pub const STREAM: u8 = 0x07;
    pub const DIGEST: u8 = 0x08;
    pub const DERIVE: u8 = 0x09;
}

fn tagged_hash(tag: u8, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([tag]);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// The public one-way function `f` of the key chain.
pub fn one_way(key: &Key) -> Key {
    tagged_hash(domain::CHAIN, &[key])
}

/// Base-station key chain. `keys[0]` is the secret generator, `keys[len]` the
/// public commitment; keys are disclosed from `len - 1` down to `0`.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyChain {
    keys: Vec<Key>,
    next_disclosure: Option<usize>,
}

impl fmt::Debug for KeyChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyChain")
            .field("length", &self.len())
            .field("commitment", &hex::encode(self.commitment()))
            .field("next_disclosure", &self.next_disclosure)
            .finish()
    }
}

impl KeyChain {
    pub fn create(seed: Key, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidParameter("key chain length must be at least 1".into()));
        }
        let mut keys = Vec::with_capacity(length + 1);
        keys.push(seed);
        for j in 1..=length {
            let next = one_way(&keys[j - 1]);
            keys.push(next);
        }
        Ok(Self { keys, next_disclosure: Some(length - 1) })
    }

    /// Chain length `L` (number of applications of `f`).
    pub fn len(&self) -> usize {
        self.keys.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generator(&self) -> &Key {
        &self.keys[0]
    }

    pub fn commitment(&self) -> &Key {
        &self.keys[self.len()]
    }

    pub fn key(&self, index: usize) -> Option<&Key> {
        self.keys.get(index)
    }

    /// Index of the next key to disclose, `None` once the chain is spent.
    pub fn next_disclosure_index(&self) -> Option<usize> {
        self.next_disclosure
    }

    /// Discloses the next key, moving the index towards the generator.
    pub fn disclose(&mut self) -> Result<(usize, Key)> {
        let index = self.next_disclosure.ok_or(Error::ChainExhausted(self.len()))?;
        self.next_disclosure = index.checked_sub(1);
        Ok((index, self.keys[index]))
    }
}

/// Accepts `candidate` iff `f^g(candidate) == last_accepted` for some
/// `1 <= g <= max_gap`; returns the smallest such `g`.
pub fn chain_verify(candidate: &Key, last_accepted: &Key, max_gap: usize) -> Option<usize> {
    let mut k = *candidate;
    for gap in 1..=max_gap {
        k = one_way(&k);
        if &k == last_accepted {
            return Some(gap);
        }
    }
    None
}

/// Key shared between one node and the base station.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PairwiseKey {
    pub node_id: NodeId,
    pub key: Key,
}

impl fmt::Debug for PairwiseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PairwiseKey({}, {}..)", self.node_id, hex::encode(&self.key[..4]))
    }
}

impl PairwiseKey {
    pub fn derive(master_seed: &Key, node_id: NodeId) -> Self {
        let key = tagged_hash(domain::PAIRWISE, &[master_seed, &node_id.0.to_le_bytes()]);
        Self { node_id, key }
    }
}

/// Symmetric hop key for the ring link between `a` and `b`.
pub fn link_key(master_seed: &Key, a: NodeId, b: NodeId) -> Key {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    tagged_hash(domain::LINK, &[master_seed, &lo.0.to_le_bytes(), &hi.0.to_le_bytes()])
}

/// Truncated HMAC-SHA256 over the domain tag and the message.
pub fn mac_compute(key: &Key, message: &[u8]) -> Tag {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(&[domain::MAC]);
    mac.update(message);
    let full = mac.finalize().into_bytes();
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    tag
}

/// Constant-time tag check.
pub fn mac_verify(key: &Key, message: &[u8], tag: &Tag) -> bool {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(&[domain::MAC]);
    mac.update(message);
    mac.verify_truncated_left(tag).is_ok()
}

/// Element of the additive group Z_2^64 used for masked collection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskValue(pub u64);

impl Add for MaskValue {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        MaskValue(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for MaskValue {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        MaskValue(self.0.wrapping_sub(rhs.0))
    }
}

impl Neg for MaskValue {
    type Output = Self;
    fn neg(self) -> Self {
        MaskValue(self.0.wrapping_neg())
    }
}

impl AddAssign for MaskValue {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for MaskValue {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl Sum for MaskValue {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(MaskValue(0), Add::add)
    }
}

impl From<u64> for MaskValue {
    fn from(v: u64) -> Self {
        MaskValue(v)
    }
}

fn first_u64(bytes: &[u8; 32]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// `h(Q | k_i)` reduced to Z_2^64.
pub fn mask_hash(query_nonce: &[u8], key: &Key) -> MaskValue {
    MaskValue(first_u64(&tagged_hash(domain::MASK, &[query_nonce, key])))
}

/// Pad shared by the unordered pair `{a, b}` for one parity round.
pub fn pad_derive(master_seed: &Key, a: NodeId, b: NodeId, round: u64) -> Result<MaskValue> {
    if a == b {
        return Err(Error::InvalidParameter(format!("pad requires two distinct nodes, got {a} twice")));
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let h = tagged_hash(
        domain::PAD,
        &[master_seed, &lo.0.to_le_bytes(), &hi.0.to_le_bytes(), &round.to_le_bytes()],
    );
    Ok(MaskValue(first_u64(&h)))
}

/// XORs a SHA-256 counter-mode keystream into `data`.
pub fn apply_keystream(key: &Key, nonce: u64, data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let ks = tagged_hash(domain::STREAM, &[key, &nonce.to_le_bytes(), &(block as u64).to_le_bytes()]);
        for (d, k) in chunk.iter_mut().zip(ks.iter()) {
            *d ^= k;
        }
    }
}

/// Eight-byte fingerprint of a ciphertext, as recorded in transcripts.
pub fn digest8(data: &[u8]) -> [u8; 8] {
    let h = tagged_hash(domain::DIGEST, &[data]);
    h[..8].try_into().unwrap()
}

/// Derives a 32-byte seed from a label and integer context, used for
/// independent deterministic randomness streams.
pub fn derive_seed(label: &str, context: &[u64]) -> Key {
    let mut h = Sha256::new();
    h.update([domain::DERIVE]);
    h.update((label.len() as u32).to_le_bytes());
    h.update(label.as_bytes());
    for c in context {
        h.update(c.to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(b: u8) -> Key {
        [b; 32]
    }

    #[test]
    fn chain_single_step() {
        let s = seed(7);
        let chain = KeyChain::create(s, 1).unwrap();
        assert_eq!(chain.commitment(), &one_way(&s));
        assert_eq!(chain.generator(), &s);
    }

    #[test]
    fn chain_composition() {
        let s = seed(9);
        let chain = KeyChain::create(s, 3).unwrap();
        assert_eq!(chain.commitment(), &one_way(&one_way(&one_way(&s))));
        assert_eq!(KeyChain::create(s, 3).unwrap(), chain);
    }

    #[test]
    fn chain_zero_length_rejected() {
        assert!(matches!(KeyChain::create(seed(1), 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn disclosure_walks_down_then_exhausts() {
        let mut chain = KeyChain::create(seed(3), 3).unwrap();
        let mut last = *chain.commitment();
        for expected in [2usize, 1, 0] {
            assert_eq!(chain.next_disclosure_index(), Some(expected));
            let (idx, k) = chain.disclose().unwrap();
            assert_eq!(idx, expected);
            assert_eq!(chain_verify(&k, &last, 1), Some(1));
            last = k;
        }
        assert_eq!(chain.next_disclosure_index(), None);
        assert!(matches!(chain.disclose(), Err(Error::ChainExhausted(3))));
    }

    #[test]
    fn verify_examples() {
        let k = seed(5);
        assert_eq!(chain_verify(&k, &one_way(&k), 1), Some(1));
        assert_eq!(chain_verify(&k, &one_way(&one_way(&k)), 3), Some(2));
        assert_eq!(chain_verify(&k, &one_way(&one_way(&k)), 1), None);
        assert_eq!(chain_verify(&k, &k, 4), None);
        assert_eq!(chain_verify(&k, &one_way(&k), 0), None);
    }

    #[test]
    fn verify_rejects_unrelated_candidate() {
        // Oracle: apply f up to five times to r by hand and confirm none hits f(k).
        let k = seed(5);
        let target = one_way(&k);
        let r = seed(6);
        let mut x = r;
        for _ in 0..5 {
            x = one_way(&x);
            assert_ne!(x, target);
        }
        assert_eq!(chain_verify(&r, &target, 5), None);
    }

    #[test]
    fn mac_examples() {
        let k1 = seed(1);
        let k2 = seed(2);
        let msg = b"energy token".to_vec();
        let mut flipped = msg.clone();
        flipped[3] ^= 0x01;
        let t = mac_compute(&k1, &msg);
        assert_eq!(t, mac_compute(&k1, &msg));
        assert_ne!(t, mac_compute(&k1, &flipped));
        assert_ne!(t, mac_compute(&k2, &msg));
        assert!(mac_verify(&k1, &msg, &t));
        assert!(!mac_verify(&k1, &flipped, &t));
        assert!(!mac_verify(&k2, &msg, &t));
    }

    #[test]
    fn mask_hash_examples() {
        let k = seed(4);
        assert_eq!(mask_hash(b"Q1", &k), mask_hash(b"Q1", &k));
        assert_ne!(mask_hash(b"Q1", &k), mask_hash(b"Q2", &k));
        let keys: Vec<Key> = (0..7).map(seed).collect();
        let total: MaskValue = keys.iter().map(|k| mask_hash(b"Q", k)).sum();
        let back = keys.iter().fold(total, |acc, k| acc - mask_hash(b"Q", k));
        assert_eq!(back, MaskValue(0));
    }

    #[test]
    fn pad_examples() {
        let s = seed(8);
        let (a, b) = (NodeId(3), NodeId(7));
        assert_eq!(pad_derive(&s, a, b, 0).unwrap(), pad_derive(&s, b, a, 0).unwrap());
        assert_ne!(pad_derive(&s, a, b, 0).unwrap(), pad_derive(&s, a, b, 1).unwrap());
        assert!(matches!(pad_derive(&s, a, a, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn ring_pads_cancel() {
        let s = seed(11);
        let ring: Vec<NodeId> = [4, 9, 2, 6, 1].into_iter().map(NodeId).collect();
        let n = ring.len();
        let x = (0..n).fold(0u64, |acc, i| {
            let left = ring[(i + n - 1) % n];
            let right = ring[(i + 1) % n];
            let pl = pad_derive(&s, ring[i], left, 5).unwrap().0;
            let pr = pad_derive(&s, ring[i], right, 5).unwrap().0;
            acc ^ pl ^ pr
        });
        assert_eq!(x, 0);
    }

    #[test]
    fn keystream_is_involution() {
        let k = seed(2);
        let mut data: Vec<u8> = (0..70).collect();
        let orig = data.clone();
        apply_keystream(&k, 42, &mut data);
        assert_ne!(data, orig);
        apply_keystream(&k, 42, &mut data);
        assert_eq!(data, orig);
    }

    #[test]
    fn link_key_symmetric() {
        let s = seed(1);
        assert_eq!(link_key(&s, NodeId(1), NodeId(2)), link_key(&s, NodeId(2), NodeId(1)));
        assert_ne!(link_key(&s, NodeId(1), NodeId(2)), link_key(&s, NodeId(1), NodeId(3)));
    }
}
