//! Byzantine behaviours, applied to outgoing traffic at send time.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::{Message, Payload, RbKind};
use crate::netsim::{Endpoint, Interceptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryKind {
    #[default]
    None,
    /// Corrupts broadcast payloads and digests and flips binary values.
    Byz1,
    /// Withholds its own proposals from all but t+1 correct nodes and never
    /// answers fetches.
    Byz2,
    Silent,
}

impl AdversaryKind {
    pub const ALL: [AdversaryKind; 4] = [Self::None, Self::Byz1, Self::Byz2, Self::Silent];
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Byz1 => "byz1",
            Self::Byz2 => "byz2",
            Self::Silent => "silent",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown adversary {0:?} (expected none, byz1, byz2 or silent)")]
pub struct UnknownAdversary(String);

impl FromStr for AdversaryKind {
    type Err = UnknownAdversary;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "byz1" => Ok(Self::Byz1),
            "byz2" => Ok(Self::Byz2),
            "silent" => Ok(Self::Silent),
            _ => Err(UnknownAdversary(s.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("{count} byzantine nodes exceed t = {t}")]
    TooMany { count: usize, t: usize },
    #[error("byzantine node {0} is not a node id")]
    OutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub byzantine: BTreeSet<usize>,
}

impl AdversarySpec {
    pub fn none() -> Self {
        AdversarySpec { kind: AdversaryKind::None, byzantine: BTreeSet::new() }
    }

    /// The `count` highest node ids; no nodes when `kind` is `None`.
    pub fn highest(kind: AdversaryKind, n: usize, count: usize) -> Self {
        let byzantine = match kind {
            AdversaryKind::None => BTreeSet::new(),
            _ => (n.saturating_sub(count)..n).collect(),
        };
        AdversarySpec { kind, byzantine }
    }

    pub fn validate(&self, n: usize, t: usize) -> Result<(), AdversaryError> {
        if self.byzantine.len() > t {
            return Err(AdversaryError::TooMany { count: self.byzantine.len(), t });
        }
        match self.byzantine.iter().find(|&&b| b >= n) {
            Some(&b) => Err(AdversaryError::OutOfRange(b)),
            None => Ok(()),
        }
    }

    pub fn is_byzantine(&self, id: usize) -> bool {
        self.byzantine.contains(&id)
    }
}

pub struct Adversary {
    spec: AdversarySpec,
    /// Correct nodes that still get a Byz2 broadcaster's proposal.
    favoured: BTreeSet<usize>,
}

impl Adversary {
    pub fn new(spec: AdversarySpec, n: usize, t: usize) -> Self {
        let favoured = (0..n).filter(|i| !spec.is_byzantine(*i)).take(t + 1).collect();
        Adversary { spec, favoured }
    }

    fn byz1(&self, dst: Endpoint, msg: Message) -> Option<Message> {
        Some(match msg {
            Message::Rb(mut m) => {
                m.kind = match m.kind {
                    RbKind::Init(p) => RbKind::Init(corrupt(&p, dst)),
                    RbKind::FetchResp(p) => RbKind::FetchResp(corrupt(&p, dst)),
                    RbKind::Echo(mut d) => {
                        d.0[0] ^= 1;
                        RbKind::Echo(d)
                    }
                    RbKind::Ready(mut d) => {
                        d.0[0] ^= 1;
                        RbKind::Ready(d)
                    }
                    k @ RbKind::FetchReq(_) => k,
                };
                Message::Rb(m)
            }
            Message::Bin(mut m) => {
                m.value = !m.value;
                Message::Bin(m)
            }
            Message::ReadResp { poll, account, height, utxos } => {
                // Lies about balances: hides the oldest output.
                let utxos = Arc::new(utxos.iter().skip(1).cloned().collect());
                Message::ReadResp { poll, account, height, utxos }
            }
            other => other,
        })
    }

    fn byz2(&self, src: Endpoint, dst: Endpoint, msg: Message) -> Option<Message> {
        match &msg {
            Message::Rb(m) => match &m.kind {
                RbKind::Init(_) if m.key.broadcaster.index() == src => {
                    (self.favoured.contains(&dst) || self.spec.is_byzantine(dst)).then_some(msg)
                }
                RbKind::FetchResp(_) => None,
                _ => Some(msg),
            },
            _ => Some(msg),
        }
    }
}

/// Appends a receiver-specific byte, so the payload no longer decodes and
/// no two receivers see the same digest.
fn corrupt(p: &Payload, dst: Endpoint) -> Payload {
    let mut bytes = p.bytes().to_vec();
    bytes.push(dst as u8);
    Payload::new(bytes)
}

impl Interceptor<Message> for Adversary {
    fn on_send(&mut self, src: Endpoint, dst: Endpoint, msg: Message) -> Option<Message> {
        if src == dst || !self.spec.is_byzantine(src) {
            return Some(msg);
        }
        match self.spec.kind {
            AdversaryKind::None => Some(msg),
            AdversaryKind::Silent => None,
            AdversaryKind::Byz1 => self.byz1(dst, msg),
            AdversaryKind::Byz2 => self.byz2(src, dst, msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Digest;
    use crate::message::{BinKind, BinMessage, Proposal, RbKey, RbMessage};
    use crate::types::NodeId;

    fn init(broadcaster: u32) -> Message {
        let p = Payload::from_proposal(Proposal { proposer: NodeId(broadcaster), instance: 1, txs: vec![] });
        Message::Rb(RbMessage { key: RbKey { instance: 1, broadcaster: NodeId(broadcaster) }, kind: RbKind::Init(p) })
    }

    #[test]
    fn spec_defaults_and_validation() {
        let s = AdversarySpec::highest(AdversaryKind::Byz1, 7, 2);
        assert_eq!(s.byzantine, [5, 6].into());
        assert!(s.validate(7, 2).is_ok());
        assert_eq!(
            AdversarySpec::highest(AdversaryKind::Silent, 7, 3).validate(7, 2),
            Err(AdversaryError::TooMany { count: 3, t: 2 })
        );
        assert!(AdversarySpec::highest(AdversaryKind::None, 7, 2).byzantine.is_empty());
        assert_eq!("BYZ2".parse::<AdversaryKind>(), Ok(AdversaryKind::Byz2));
        assert!("evil".parse::<AdversaryKind>().is_err());
    }

    #[test]
    fn byz1_corrupts_payloads_and_flips_bits() {
        let mut a = Adversary::new(AdversarySpec::highest(AdversaryKind::Byz1, 4, 1), 4, 1);
        let Some(Message::Rb(m)) = a.on_send(3, 0, init(3)) else { panic!() };
        let RbKind::Init(p) = m.kind else { panic!() };
        assert!(p.proposal().is_none());
        let bin = Message::Bin(BinMessage { instance: 1, proposer: NodeId(0), round: 1, kind: BinKind::Est, value: true });
        let Some(Message::Bin(b)) = a.on_send(3, 1, bin.clone()) else { panic!() };
        assert!(!b.value);
        assert_eq!(a.on_send(1, 2, bin.clone()), Some(bin.clone()));
        assert_eq!(a.on_send(3, 3, bin.clone()), Some(bin));
        let echo = Message::Rb(RbMessage { key: RbKey { instance: 1, broadcaster: NodeId(0) }, kind: RbKind::Echo(Digest::ZERO) });
        let Some(Message::Rb(RbMessage { kind: RbKind::Echo(d), .. })) = a.on_send(3, 0, echo) else { panic!() };
        assert_ne!(d, Digest::ZERO);
    }

    #[test]
    fn byz2_targets_t_plus_one_correct_nodes() {
        let (n, t) = (7, 2);
        let mut a = Adversary::new(AdversarySpec::highest(AdversaryKind::Byz2, n, t), n, t);
        let got: Vec<usize> = (0..n).filter(|&d| d != 6 && a.on_send(6, d, init(6)).is_some()).collect();
        assert_eq!(got, vec![0, 1, 2, 5]);
        // Relaying someone else's proposal is untouched.
        assert!(a.on_send(6, 4, init(0)).is_some());
        let resp = Message::Rb(RbMessage {
            key: RbKey { instance: 1, broadcaster: NodeId(6) },
            kind: RbKind::FetchResp(Payload::new(vec![])),
        });
        assert!(a.on_send(5, 3, resp).is_none());
    }

    #[test]
    fn silent_drops_everything_but_self_sends() {
        let mut a = Adversary::new(AdversarySpec::highest(AdversaryKind::Silent, 4, 1), 4, 1);
        assert!(a.on_send(3, 0, init(3)).is_none());
        assert!(a.on_send(3, 3, init(3)).is_some());
        assert!(a.on_send(0, 3, init(0)).is_some());
    }
}
