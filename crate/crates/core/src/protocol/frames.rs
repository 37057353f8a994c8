//! Wire bodies and the encrypt-then-MAC frame layer.
//!
//! Every sealed payload is `nonce (8 bytes, clear) || ciphertext`. Bodies
//! have fixed lengths per message type so frame sizes never depend on
//! content.

use crate::crypto::{apply_keystream, mac_compute, mac_verify, Key, KEY_LEN};
use crate::netsim::{Addr, Message, MsgType, NodeId};

pub(crate) const NONCE_LEN: usize = 8;

/// Monotone nonce source shared by every sealing party in a simulation.
#[derive(Clone, Debug, Default)]
pub(crate) struct Nonces(u64);

impl Nonces {
    pub(crate) fn next(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

pub(crate) fn seal(nonces: &mut Nonces, key: &Key, body: &[u8]) -> Vec<u8> {
    let nonce = nonces.next();
    let mut out = Vec::with_capacity(NONCE_LEN + body.len());
    out.extend_from_slice(&nonce.to_le_bytes());
    let mut ct = body.to_vec();
    apply_keystream(key, nonce, &mut ct);
    out.extend_from_slice(&ct);
    out
}

pub(crate) fn unseal(key: &Key, payload: &[u8]) -> Option<Vec<u8>> {
    let (n, ct) = payload.split_at_checked(NONCE_LEN)?;
    let nonce = u64::from_le_bytes(n.try_into().ok()?);
    let mut body = ct.to_vec();
    apply_keystream(key, nonce, &mut body);
    Some(body)
}

/// Encrypted and authenticated frame under `key`.
pub(crate) fn sealed(
    nonces: &mut Nonces,
    msg_type: MsgType,
    from: impl Into<Addr>,
    to: impl Into<Addr>,
    key: &Key,
    body: &[u8],
) -> Message {
    let mut m = Message::new(msg_type, from, to, seal(nonces, key, body));
    m.mac = Some(mac_compute(key, &m.authenticated_bytes()));
    m
}

/// Verifies the MAC and decrypts. `None` on any authentication failure.
pub(crate) fn open(msg: &Message, key: &Key) -> Option<Vec<u8>> {
    let tag = msg.mac?;
    if !mac_verify(key, &msg.authenticated_bytes(), &tag) {
        return None;
    }
    unseal(key, &msg.payload)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let (head, rest) = self.0.split_at_checked(N)?;
        self.0 = rest;
        head.try_into().ok()
    }
    fn u8(&mut self) -> Option<u8> {
        self.take::<1>().map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }
    fn done(self) -> Option<()> {
        self.0.is_empty().then_some(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pass {
    Sum = 0,
    Broadcast = 1,
}

impl Pass {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Pass::Sum),
            1 => Some(Pass::Broadcast),
            _ => None,
        }
    }
}

/// Election token: running energy sum, then the ring average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct EnergyBody {
    pub pass: Pass,
    pub initiator: NodeId,
    pub value: f64,
    pub counter: u32,
}

impl EnergyBody {
    pub(crate) const LEN: usize = 17;
    /// Byte offset of `value` inside the sealed payload.
    pub(crate) const VALUE_OFFSET: usize = NONCE_LEN + 5;

    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.push(self.pass as u8);
        v.extend_from_slice(&self.initiator.0.to_le_bytes());
        v.extend_from_slice(&self.value.to_le_bytes());
        v.extend_from_slice(&self.counter.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { pass: Pass::from_u8(r.u8()?)?, initiator: NodeId(r.u32()?), value: r.f64()?, counter: r.u32()? };
        r.done()?;
        Some(body)
    }
}

/// Parity-round accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParityBody {
    pub round: u16,
    pub acc: u8,
}

impl ParityBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = self.round.to_le_bytes().to_vec();
        v.push(self.acc);
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { round: r.u16()?, acc: r.u8()? };
        r.done()?;
        Some(body)
    }
}

/// Reading sum on the first pass, the ring total on the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DataBody {
    pub pass: Pass,
    pub value: u64,
}

impl DataBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = vec![self.pass as u8];
        v.extend_from_slice(&self.value.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { pass: Pass::from_u8(r.u8()?)?, value: r.u64()? };
        r.done()?;
        Some(body)
    }
}

/// Query nonce, the epoch's chain key and (on ring hops) the masked sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct QueryBody {
    pub nonce: [u8; 16],
    pub chain_key: Key,
    pub acc: u64,
}

impl QueryBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(16 + KEY_LEN + 8);
        v.extend_from_slice(&self.nonce);
        v.extend_from_slice(&self.chain_key);
        v.extend_from_slice(&self.acc.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { nonce: r.take()?, chain_key: r.take()?, acc: r.u64()? };
        r.done()?;
        Some(body)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ResponseBody {
    pub nonce: [u8; 16],
    pub acc: u64,
}

impl ResponseBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = self.nonce.to_vec();
        v.extend_from_slice(&self.acc.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { nonce: r.take()?, acc: r.u64()? };
        r.done()?;
        Some(body)
    }
}

/// Node to base station: chosen cluster and own position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ReportBody {
    pub cluster: u32,
    pub x: f64,
    pub y: f64,
}

impl ReportBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = self.cluster.to_le_bytes().to_vec();
        v.extend_from_slice(&self.x.to_le_bytes());
        v.extend_from_slice(&self.y.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { cluster: r.u32()?, x: r.f64()?, y: r.f64()? };
        r.done()?;
        Some(body)
    }
}

/// Base station to node: final cluster and right neighbour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct SetupBody {
    pub cluster: u32,
    pub right: NodeId,
}

impl SetupBody {
    pub(crate) fn encode(&self) -> Vec<u8> {
        let mut v = self.cluster.to_le_bytes().to_vec();
        v.extend_from_slice(&self.right.0.to_le_bytes());
        v
    }

    pub(crate) fn decode(b: &[u8]) -> Option<Self> {
        let mut r = Reader(b);
        let body = Self { cluster: r.u32()?, right: NodeId(r.u32()?) };
        r.done()?;
        Some(body)
    }
}

/// Plaintext end-of-epoch disclosure of a chain key.
pub(crate) fn encode_disclosure(index: usize, key: &Key) -> Vec<u8> {
    let mut v = (index as u32).to_le_bytes().to_vec();
    v.extend_from_slice(key);
    v
}

pub(crate) fn decode_disclosure(b: &[u8]) -> Option<(usize, Key)> {
    let mut r = Reader(b);
    let out = (r.u32()? as usize, r.take()?);
    r.done()?;
    Some(out)
}
