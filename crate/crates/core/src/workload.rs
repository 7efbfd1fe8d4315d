//! Transaction sources: a pre-generated synthetic load, and requester
//! actors that spend their outputs and poll for new ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{derive_keypair, hash_parts, Account, Digest, KeyPair};
use crate::ledger::Utxo;
use crate::message::Message;
use crate::netsim::Effects;
use crate::types::{Amount, Genesis, NodeId, OutPoint, Transaction, TxOutput};

pub const INITIAL_AMOUNT: Amount = 100_000;
pub const PAYMENT: Amount = 10;

/// Payment of 10 to `to` with the rest back to `owner`, or a full spend
/// when nothing would be left.
pub fn payment(owner: &KeyPair, utxo: Utxo, to: Account, nonce: u64) -> Transaction {
    let outputs = if utxo.amount <= PAYMENT {
        vec![TxOutput { amount: utxo.amount, recipient: to }]
    } else {
        vec![
            TxOutput { amount: PAYMENT, recipient: to },
            TxOutput { amount: utxo.amount - PAYMENT, recipient: owner.account() },
        ]
    };
    Transaction::signed(&[(utxo.outpoint, owner)], outputs, nonce)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Number of independent mempools to fill.
    pub sources: usize,
    pub txs_per_source: usize,
    /// Every k-th transaction carries a broken signature; 0 disables.
    pub bad_sig_every: usize,
    /// Every k-th transaction spends a shared output that every other
    /// source also spends at the same position; 0 disables.
    pub conflict_every: usize,
    pub seed: u64,
}

pub struct Synthetic {
    pub genesis: Genesis,
    /// Pre-generated transactions per source, in proposal order.
    pub txs: Vec<Vec<Transaction>>,
}

/// Source `i` owns `txs_per_source` genesis outputs under
/// `derive_keypair(b"rbbc-client", i)` and pays 10 coins from each to a
/// random other source.
pub fn synthetic(spec: &SyntheticSpec) -> Synthetic {
    let keys: Vec<KeyPair> = (0..spec.sources as u64).map(|i| derive_keypair(b"rbbc-client", i)).collect();
    let shared = derive_keypair(b"rbbc-shared", 0);
    let per = spec.txs_per_source;
    let shared_count = if spec.conflict_every > 0 { per / spec.conflict_every + 1 } else { 0 };
    let mut entries = Vec::with_capacity(spec.sources * per + shared_count);
    for k in &keys {
        entries.extend(std::iter::repeat((k.account(), INITIAL_AMOUNT)).take(per));
    }
    entries.extend(std::iter::repeat((shared.account(), INITIAL_AMOUNT)).take(shared_count));
    let genesis = Genesis { entries };
    let id = genesis.id();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut txs = Vec::with_capacity(spec.sources);
    for (i, key) in keys.iter().enumerate() {
        let mut mine = Vec::with_capacity(per);
        for j in 0..per {
            let to = if spec.sources > 1 {
                let r = (i + rng.gen_range(1..spec.sources)) % spec.sources;
                keys[r].account()
            } else {
                key.account()
            };
            let pos = j + 1;
            let tx = if spec.conflict_every > 0 && pos % spec.conflict_every == 0 {
                let utxo = Utxo { outpoint: genesis.outpoint(id, spec.sources * per + pos / spec.conflict_every), amount: INITIAL_AMOUNT };
                payment(&shared, utxo, key.account(), i as u64)
            } else {
                let utxo = Utxo { outpoint: genesis.outpoint(id, i * per + j), amount: INITIAL_AMOUNT };
                let mut tx = payment(key, utxo, to, 0);
                if spec.bad_sig_every > 0 && pos % spec.bad_sig_every == 0 {
                    tx.inputs[0].signature.0[10] ^= 0x40;
                }
                tx
            };
            mine.push(tx);
        }
        txs.push(mine);
    }
    Synthetic { genesis, txs }
}

#[derive(Debug, Clone)]
pub struct RequesterConfig {
    pub index: usize,
    /// Proposers this requester submits to; the first is primary.
    pub window: Vec<NodeId>,
    /// Nodes polled for reads; includes the window.
    pub connections: Vec<NodeId>,
    /// Identical responses needed to accept a read.
    pub read_quorum: usize,
    pub poll_interval_us: u64,
    /// Accounts payments are drawn from, this requester's included.
    pub population: Arc<Vec<Account>>,
    pub seed: u64,
}

/// Assigns the `width` consecutive proposers starting at the account's
/// hash position, and `extra` further nodes after them.
pub fn assign_nodes(account: &Account, proposers: &[NodeId], width: usize, n: usize, extra: usize) -> (Vec<NodeId>, Vec<NodeId>) {
    let start = (account.0.prefix_u64() % proposers.len() as u64) as usize;
    let width = width.min(proposers.len());
    let window: Vec<NodeId> = (0..width).map(|i| proposers[(start + i) % proposers.len()]).collect();
    let mut connections = window.clone();
    let mut next = window.last().map_or(0, |w| w.index() + 1);
    while connections.len() < (width + extra).min(n) {
        let cand = NodeId((next % n) as u32);
        if !connections.contains(&cand) {
            connections.push(cand);
        }
        next += 1;
    }
    (window, connections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequesterTimer {
    Poll,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequesterStats {
    pub reads: u64,
    pub writes: u64,
    pub steps: u64,
    /// Issue time of every poll.
    pub polls: Vec<u64>,
}

pub struct Requester {
    cfg: RequesterConfig,
    key: KeyPair,
    rng: ChaCha8Rng,
    /// Outputs already spent by a submitted transaction.
    used: BTreeSet<OutPoint>,
    poll: u64,
    accepted_poll: u64,
    responses: HashMap<u64, BTreeMap<NodeId, Digest>>,
    /// Submission time per transaction id.
    pub submitted: Vec<(Digest, u64)>,
    pub stats: RequesterStats,
}

fn utxo_digest(utxos: &[Utxo]) -> Digest {
    let mut buf = Vec::with_capacity(utxos.len() * 44);
    for u in utxos {
        buf.extend_from_slice(u.outpoint.txid.as_bytes());
        buf.extend_from_slice(&u.outpoint.index.to_le_bytes());
        buf.extend_from_slice(&u.amount.to_le_bytes());
    }
    hash_parts(&[b"rbbc-read", &buf])
}

impl Requester {
    pub fn key_for(index: usize) -> KeyPair {
        derive_keypair(b"rbbc-requester", index as u64)
    }

    pub fn new(cfg: RequesterConfig) -> Self {
        Requester {
            key: Self::key_for(cfg.index),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ (cfg.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            used: BTreeSet::new(),
            poll: 0,
            accepted_poll: 0,
            responses: HashMap::new(),
            submitted: Vec::new(),
            stats: RequesterStats::default(),
            cfg,
        }
    }

    pub fn account(&self) -> Account {
        self.key.account()
    }

    pub fn config(&self) -> &RequesterConfig {
        &self.cfg
    }

    pub fn start<E: Effects<Message, RequesterTimer>>(&mut self, fx: &mut E) {
        self.issue_poll(fx);
    }

    fn issue_poll<E: Effects<Message, RequesterTimer>>(&mut self, fx: &mut E) {
        self.poll += 1;
        self.stats.reads += 1;
        self.stats.polls.push(fx.now());
        for c in &self.cfg.connections {
            fx.send(c.index(), Message::ReadReq { poll: self.poll, account: self.account() }, 1);
        }
        fx.timer(self.cfg.poll_interval_us, RequesterTimer::Poll);
    }

    pub fn on_timer<E: Effects<Message, RequesterTimer>>(&mut self, fx: &mut E, _t: RequesterTimer) {
        self.responses.retain(|p, _| *p + 4 > self.poll);
        self.issue_poll(fx);
    }

    pub fn on_message<E: Effects<Message, RequesterTimer>>(&mut self, fx: &mut E, from: NodeId, msg: Message) {
        let Message::ReadResp { poll, account, utxos, .. } = msg else { return };
        if account != self.account() || poll <= self.accepted_poll || !self.cfg.connections.contains(&from) {
            return;
        }
        let d = utxo_digest(&utxos);
        let votes = self.responses.entry(poll).or_default();
        votes.insert(from, d);
        if votes.values().filter(|v| **v == d).count() < self.cfg.read_quorum {
            return;
        }
        self.accepted_poll = poll;
        self.responses.retain(|p, _| *p > poll);
        let fresh: Vec<Utxo> = utxos.iter().filter(|u| !self.used.contains(&u.outpoint)).copied().collect();
        if !fresh.is_empty() {
            self.step(fx, fresh);
        }
    }

    fn step<E: Effects<Message, RequesterTimer>>(&mut self, fx: &mut E, fresh: Vec<Utxo>) {
        self.stats.steps += 1;
        let pop = &self.cfg.population;
        for utxo in fresh {
            self.used.insert(utxo.outpoint);
            let to = if pop.len() > 1 {
                let me = pop.iter().position(|a| *a == self.key.account());
                loop {
                    let r = self.rng.gen_range(0..pop.len());
                    if Some(r) != me {
                        break pop[r];
                    }
                }
            } else {
                self.key.account()
            };
            let tx = payment(&self.key, utxo, to, 0);
            self.submitted.push((tx.txid(), fx.now()));
            self.stats.writes += 1;
            let tx = Arc::new(tx);
            for (rank, p) in self.cfg.window.iter().enumerate() {
                fx.send(p.index(), Message::Submit { tx: tx.clone(), rank: rank as u8 }, 1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{filter_conflicts, UtxoTable, ValidationVerdict};

    #[test]
    fn payment_shapes() {
        let kp = derive_keypair(b"w", 0);
        let to = derive_keypair(b"w", 1).account();
        let op = OutPoint { txid: Digest::ZERO, index: 0 };
        let tx = payment(&kp, Utxo { outpoint: op, amount: 100_000 }, to, 0);
        let amounts: Vec<Amount> = tx.outputs.iter().map(|o| o.amount).collect();
        assert_eq!(amounts, vec![10, 99_990]);
        assert_eq!(tx.outputs[1].recipient, kp.account());
        let tx = payment(&kp, Utxo { outpoint: op, amount: 10 }, to, 0);
        assert_eq!(tx.outputs, vec![TxOutput { amount: 10, recipient: to }]);
    }

    #[test]
    fn synthetic_sources_are_disjoint_and_valid() {
        let s = synthetic(&SyntheticSpec { sources: 4, txs_per_source: 5, bad_sig_every: 0, conflict_every: 0, seed: 1 });
        let table = UtxoTable::from_genesis(&s.genesis);
        let all: Vec<Transaction> = s.txs.concat();
        let out = filter_conflicts(&table, &all);
        assert_eq!(out.included.len(), 20);
        assert_eq!(s.genesis.total(), 20 * INITIAL_AMOUNT);
    }

    #[test]
    fn synthetic_bad_and_conflicting() {
        let spec = SyntheticSpec { sources: 3, txs_per_source: 6, bad_sig_every: 4, conflict_every: 3, seed: 2 };
        let s = synthetic(&spec);
        let table = UtxoTable::from_genesis(&s.genesis);
        let out = filter_conflicts(&table, &s.txs.concat());
        // Per source: positions 3 and 6 conflict, position 4 is forged.
        let bad = out.rejected.iter().filter(|(_, v)| *v == ValidationVerdict::BadSignature).count();
        let dup = out.rejected.iter().filter(|(_, v)| *v == ValidationVerdict::DoubleSpendWithinBlock).count();
        assert_eq!(bad, 3);
        assert_eq!(dup, 4);
        assert_eq!(out.included.len(), 18 - 7);
        let again = synthetic(&spec);
        assert_eq!((s.genesis, s.txs), (again.genesis, again.txs));
    }

    #[test]
    fn window_and_connections() {
        let proposers: Vec<NodeId> = (0..10).map(NodeId).collect();
        let acct = derive_keypair(b"w", 3).account();
        let (w, c) = assign_nodes(&acct, &proposers, 4, 10, 3);
        assert_eq!(w.len(), 4);
        assert_eq!(c.len(), 7);
        assert_eq!(&c[..4], &w[..]);
        let set: BTreeSet<_> = c.iter().collect();
        assert_eq!(set.len(), 7);
        for pair in w.windows(2) {
            assert_eq!((pair[0].index() + 1) % 10, pair[1].index());
        }
    }
}
