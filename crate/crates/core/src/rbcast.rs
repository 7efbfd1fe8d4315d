//! Reliable broadcast with digest-only ECHO/READY and payload fetching.
//!
//! Each [`RbInstance`] is a pure state machine: inputs are received messages
//! and timer firings, outputs are [`RbAction`]s the caller turns into sends.
//! Every action carries a hop depth: one more than the deepest message in the
//! set that triggered it.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::Digest;
use crate::message::{Payload, RbKey, RbKind};
use crate::types::NodeId;

#[derive(Debug, Clone, Copy)]
pub struct RbParams {
    pub n: usize,
    pub t: usize,
    pub me: NodeId,
    /// Largest proposal accepted in an INIT.
    pub max_txs: usize,
    pub fetch_timeout_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RbAction {
    /// Send to every node, including self.
    Broadcast { kind: RbKind, hop: u32 },
    Send { to: NodeId, kind: RbKind, hop: u32 },
    Deliver { payload: Payload, hop: u32 },
    /// Call [`RbInstance::on_fetch_timer`] with `attempt` after the delay.
    FetchTimer { attempt: u32, after_us: u64 },
}

#[derive(Debug, Clone)]
struct FetchState {
    digest: Digest,
    asked: BTreeSet<NodeId>,
    attempt: u32,
    hop: u32,
}

#[derive(Debug, Clone)]
pub struct RbInstance {
    key: RbKey,
    p: RbParams,
    init: Option<(Payload, u32)>,
    fetched: Option<(Payload, u32)>,
    /// First ECHO / READY of each sender, with its hop.
    echoes: BTreeMap<NodeId, (Digest, u32)>,
    readies: BTreeMap<NodeId, (Digest, u32)>,
    broadcast_done: bool,
    sent_echo: bool,
    sent_ready: bool,
    delivered: Option<(Payload, u32)>,
    fetch: Option<FetchState>,
    /// Targets of every FETCH_REQ issued, in order.
    pub fetch_targets: Vec<NodeId>,
    pub malformed_inits: u64,
    pub mismatched_responses: u64,
    pub fetch_responses_sent: u64,
}

impl RbInstance {
    pub fn new(key: RbKey, p: RbParams) -> Self {
        RbInstance {
            key,
            p,
            init: None,
            fetched: None,
            echoes: BTreeMap::new(),
            readies: BTreeMap::new(),
            broadcast_done: false,
            sent_echo: false,
            sent_ready: false,
            delivered: None,
            fetch: None,
            fetch_targets: Vec::new(),
            malformed_inits: 0,
            mismatched_responses: 0,
            fetch_responses_sent: 0,
        }
    }

    pub fn key(&self) -> RbKey {
        self.key
    }

    pub fn delivered(&self) -> Option<&Payload> {
        self.delivered.as_ref().map(|(p, _)| p)
    }

    /// Hop depth at which the payload was delivered.
    pub fn delivered_hop(&self) -> Option<u32> {
        self.delivered.as_ref().map(|(_, h)| *h)
    }

    /// Whether this node obtained the payload through a fetch.
    pub fn fetched(&self) -> bool {
        self.fetched.is_some()
    }

    /// Starts the broadcast. Panics if called twice or by a non-broadcaster.
    pub fn broadcast(&mut self, payload: Payload) -> Vec<RbAction> {
        assert_eq!(self.p.me, self.key.broadcaster, "only the broadcaster may broadcast");
        assert!(!self.broadcast_done, "double broadcast on {:?}", self.key);
        self.broadcast_done = true;
        vec![RbAction::Broadcast { kind: RbKind::Init(payload), hop: 1 }]
    }

    fn init_is_valid(&self, from: NodeId, payload: &Payload) -> bool {
        from == self.key.broadcaster
            && payload.proposal().is_some_and(|p| {
                p.proposer == self.key.broadcaster
                    && p.instance == self.key.instance
                    && p.txs.len() <= self.p.max_txs
            })
    }

    fn held(&self, d: &Digest) -> Option<(Payload, u32)> {
        [&self.init, &self.fetched]
            .into_iter()
            .flatten()
            .find(|(p, _)| p.digest() == *d)
            .cloned()
    }

    pub fn on_message(&mut self, from: NodeId, kind: RbKind, hop: u32) -> Vec<RbAction> {
        let mut out = Vec::new();
        match kind {
            RbKind::Init(payload) => {
                if self.init.is_some() {
                    return out;
                }
                if !self.init_is_valid(from, &payload) {
                    self.malformed_inits += 1;
                    return out;
                }
                let d = payload.digest();
                self.init = Some((payload, hop));
                if !self.sent_echo {
                    self.sent_echo = true;
                    out.push(RbAction::Broadcast { kind: RbKind::Echo(d), hop: hop + 1 });
                }
            }
            RbKind::Echo(d) => {
                self.echoes.entry(from).or_insert((d, hop));
            }
            RbKind::Ready(d) => {
                self.readies.entry(from).or_insert((d, hop));
            }
            RbKind::FetchReq(d) => {
                if let Some((payload, _)) = self.held(&d) {
                    self.fetch_responses_sent += 1;
                    out.push(RbAction::Send { to: from, kind: RbKind::FetchResp(payload), hop: hop + 1 });
                }
            }
            RbKind::FetchResp(payload) => match &self.fetch {
                Some(f) if f.digest == payload.digest() => {
                    if self.fetched.is_none() {
                        self.fetched = Some((payload, hop));
                    }
                }
                Some(_) => self.mismatched_responses += 1,
                None if self.delivered.is_none() => self.mismatched_responses += 1,
                None => {}
            },
        }
        self.progress(&mut out);
        out
    }

    pub fn on_fetch_timer(&mut self, attempt: u32) -> Vec<RbAction> {
        let mut out = Vec::new();
        if self.delivered.is_some() {
            return out;
        }
        if let Some(f) = &self.fetch {
            if f.attempt == attempt {
                self.send_fetch(&mut out);
            }
        }
        out
    }

    fn quorum_for(map: &BTreeMap<NodeId, (Digest, u32)>, threshold: usize) -> Option<(Digest, u32)> {
        let mut counts: BTreeMap<Digest, (usize, u32)> = BTreeMap::new();
        for (d, h) in map.values() {
            let e = counts.entry(*d).or_insert((0, 0));
            e.0 += 1;
            e.1 = e.1.max(*h);
        }
        counts
            .into_iter()
            .find(|(_, (c, _))| *c >= threshold)
            .map(|(d, (_, h))| (d, h))
    }

    fn progress(&mut self, out: &mut Vec<RbAction>) {
        let t = self.p.t;
        if !self.sent_ready {
            let trigger = Self::quorum_for(&self.echoes, 2 * t + 1).or_else(|| Self::quorum_for(&self.readies, t + 1));
            if let Some((d, h)) = trigger {
                self.sent_ready = true;
                out.push(RbAction::Broadcast { kind: RbKind::Ready(d), hop: h + 1 });
            }
        }
        if self.delivered.is_some() {
            return;
        }
        let Some((d, ready_hop)) = Self::quorum_for(&self.readies, 2 * t + 1) else {
            return;
        };
        if let Some((payload, payload_hop)) = self.held(&d) {
            let hop = ready_hop.max(payload_hop);
            self.delivered = Some((payload.clone(), hop));
            out.push(RbAction::Deliver { payload, hop });
        } else if self.fetch.as_ref().is_none_or(|f| f.digest != d) {
            self.fetch = Some(FetchState { digest: d, asked: BTreeSet::new(), attempt: 0, hop: ready_hop });
            self.send_fetch(out);
        }
    }

    /// Asks the next `t + 1` lowest-id nodes that vouched for the digest.
    fn send_fetch(&mut self, out: &mut Vec<RbAction>) {
        let me = self.p.me;
        let want = self.p.t + 1;
        let f = self.fetch.as_mut().expect("fetch state");
        let vouchers: BTreeSet<NodeId> = self
            .echoes
            .iter()
            .chain(self.readies.iter())
            .filter(|(id, (d, _))| *d == f.digest && **id != me)
            .map(|(id, _)| *id)
            .collect();
        let mut targets: Vec<NodeId> = vouchers.iter().filter(|id| !f.asked.contains(id)).take(want).copied().collect();
        if targets.is_empty() {
            f.asked.clear();
            targets = vouchers.iter().take(want).copied().collect();
        }
        for to in &targets {
            f.asked.insert(*to);
            out.push(RbAction::Send { to: *to, kind: RbKind::FetchReq(f.digest), hop: f.hop + 1 });
        }
        self.fetch_targets.extend(targets);
        f.attempt += 1;
        out.push(RbAction::FetchTimer { attempt: f.attempt, after_us: self.p.fetch_timeout_us });
    }
}
