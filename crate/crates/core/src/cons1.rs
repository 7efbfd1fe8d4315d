//! Leader-based three-phase baseline. One leader proposal per instance,
//! fully verified by every node after commit.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use crate::crypto::{Digest, SigCache};
use crate::ledger::{filter_conflicts_with, FilterPolicy, SigPolicy, UtxoTable, ValidationVerdict};
use crate::mempool::Mempool;
use crate::message::{Cons1Kind, Cons1Message, Message, Payload, Proposal};
use crate::netsim::Effects;
use crate::records::{BlockRecord, NodeLog, TxRecord};
use crate::types::{Bitmap, Block, BlockMeta, Genesis, NodeId, Params, Transaction};

#[derive(Debug, Clone)]
pub struct Cons1Config {
    pub params: Params,
    pub me: NodeId,
    pub leader: NodeId,
    pub verify_cost_us: u64,
    /// The leader re-sends its pre-prepare if the instance has not
    /// committed after this long.
    pub resend_timeout_us: u64,
    pub allow_chained: bool,
    pub record_txs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cons1Timer {
    Resend { instance: u64 },
    VerifyDone { instance: u64 },
}

#[derive(Default)]
struct Instance {
    started_at: u64,
    pre_prepare: Option<(Payload, u32)>,
    prepares: BTreeMap<Digest, BTreeMap<NodeId, u32>>,
    commits: BTreeMap<Digest, BTreeMap<NodeId, u32>>,
    prepared: bool,
    committed: Option<(Digest, u32, u64)>,
    done: bool,
}

pub struct Cons1Node {
    cfg: Cons1Config,
    sigs: SigCache,
    table: UtxoTable,
    mempool: Mempool,
    last_hash: Digest,
    round: u64,
    instances: BTreeMap<u64, Instance>,
    future: BTreeMap<u64, Vec<(NodeId, Message, u32)>>,
    busy_until: u64,
    pub log: NodeLog,
}

fn quorum_hop(votes: &BTreeMap<NodeId, u32>, q: usize) -> Option<u32> {
    // Hop of the q-th earliest-depth vote: the shallowest quorum.
    if votes.len() < q {
        return None;
    }
    let mut hops: Vec<u32> = votes.values().copied().collect();
    hops.sort_unstable();
    Some(hops[q - 1])
}

impl Cons1Node {
    pub fn new(cfg: Cons1Config, genesis: &Genesis, sigs: SigCache, preload: Vec<Transaction>) -> Self {
        let mut mempool = Mempool::new();
        for tx in preload {
            let _ = mempool.admit(tx, 0);
        }
        Cons1Node {
            table: UtxoTable::from_genesis(genesis),
            last_hash: genesis.id(),
            sigs,
            mempool,
            round: 0,
            instances: BTreeMap::new(),
            future: BTreeMap::new(),
            busy_until: 0,
            log: NodeLog::default(),
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.cfg.me
    }

    pub fn table(&self) -> &UtxoTable {
        &self.table
    }

    pub fn height(&self) -> u64 {
        self.log.blocks.len() as u64
    }

    fn is_leader(&self) -> bool {
        self.cfg.me == self.cfg.leader
    }

    fn broadcast<E: Effects<Message, Cons1Timer>>(&self, fx: &mut E, k: u64, kind: Cons1Kind, hop: u32) {
        for dst in 0..self.cfg.params.n {
            fx.send(dst, Message::Cons1(Cons1Message { instance: k, kind: kind.clone() }), hop);
        }
    }

    pub fn start<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E) {
        self.start_round(fx, 1);
    }

    fn start_round<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, k: u64) {
        self.round = k;
        self.instances.insert(k, Instance { started_at: fx.now(), ..Default::default() });
        if self.is_leader() {
            let txs = self.mempool.take(k, self.cfg.params.beta);
            let payload = Payload::from_proposal(Proposal { proposer: self.cfg.me, instance: k, txs });
            self.broadcast(fx, k, Cons1Kind::PrePrepare(payload), 1);
            fx.timer(self.cfg.resend_timeout_us, Cons1Timer::Resend { instance: k });
        }
        if let Some(buffered) = self.future.remove(&k) {
            for (from, msg, hop) in buffered {
                self.on_message(fx, from, msg, hop);
            }
        }
    }

    pub fn on_message<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, from: NodeId, msg: Message, hop: u32) {
        match msg {
            Message::Cons1(m) => {
                if m.instance == 0 || from.index() >= self.cfg.params.n {
                    return;
                }
                if m.instance > self.round {
                    self.future.entry(m.instance).or_default().push((from, Message::Cons1(m), hop));
                    return;
                }
                self.on_cons1(fx, from, m, hop);
            }
            Message::Submit { tx, .. } => {
                let _ = self.mempool.admit((*tx).clone(), self.round + 1);
            }
            Message::ReadReq { poll, account } => {
                self.log.reads_served += 1;
                let utxos = Arc::new(self.table.request_utxos(&account));
                let resp = Message::ReadResp { poll, account, height: self.height(), utxos };
                fx.send(from.index(), resp, hop + 1);
            }
            _ => {}
        }
    }

    fn on_cons1<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, from: NodeId, m: Cons1Message, hop: u32) {
        let k = m.instance;
        let q = self.cfg.params.quorum();
        let leader = self.cfg.leader;
        let Some(inst) = self.instances.get_mut(&k) else { return };
        if inst.done {
            return;
        }
        match m.kind {
            Cons1Kind::PrePrepare(payload) => {
                if from != leader || inst.pre_prepare.is_some() {
                    return;
                }
                let valid = payload.proposal().is_some_and(|p| {
                    p.instance == k && p.proposer == leader && p.txs.len() <= self.cfg.params.beta
                });
                if !valid {
                    return;
                }
                let d = payload.digest();
                inst.pre_prepare = Some((payload, hop));
                self.broadcast(fx, k, Cons1Kind::Prepare(d), hop + 1);
            }
            Cons1Kind::Prepare(d) => {
                inst.prepares.entry(d).or_default().entry(from).or_insert(hop);
                if !inst.prepared {
                    if let Some(h) = quorum_hop(&inst.prepares[&d], q) {
                        inst.prepared = true;
                        self.broadcast(fx, k, Cons1Kind::Commit(d), h + 1);
                    }
                }
            }
            Cons1Kind::Commit(d) => {
                inst.commits.entry(d).or_default().entry(from).or_insert(hop);
            }
        }
        self.try_commit(fx, k);
    }

    fn try_commit<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, k: u64) {
        let q = self.cfg.params.quorum();
        let inst = self.instances.get_mut(&k).expect("instance");
        if inst.committed.is_some() {
            return;
        }
        let Some((payload, _)) = &inst.pre_prepare else { return };
        let d = payload.digest();
        let Some(h) = inst.commits.get(&d).and_then(|c| quorum_hop(c, q)) else { return };
        let now = fx.now();
        inst.committed = Some((d, h, now));
        let n_txs = payload.proposal().map_or(0, |p| p.txs.len()) as u64;
        let start = self.busy_until.max(now);
        self.busy_until = start + n_txs * self.cfg.verify_cost_us;
        self.log.verify_jobs += 1;
        fx.timer(self.busy_until - now, Cons1Timer::VerifyDone { instance: k });
    }

    pub fn on_timer<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, timer: Cons1Timer) {
        match timer {
            Cons1Timer::Resend { instance } => {
                let inst = &self.instances[&instance];
                if inst.committed.is_some() || inst.done {
                    return;
                }
                if let Some((payload, _)) = &inst.pre_prepare {
                    let payload = payload.clone();
                    self.broadcast(fx, instance, Cons1Kind::PrePrepare(payload), 1);
                }
                fx.timer(self.cfg.resend_timeout_us, Cons1Timer::Resend { instance });
            }
            Cons1Timer::VerifyDone { instance } => self.finalize(fx, instance),
        }
    }

    fn finalize<E: Effects<Message, Cons1Timer>>(&mut self, fx: &mut E, k: u64) {
        let inst = self.instances.get_mut(&k).expect("instance");
        inst.done = true;
        let (_, hop, decided_at) = inst.committed.expect("committed");
        let (payload, _) = inst.pre_prepare.take().expect("pre-prepare");
        let started_at = inst.started_at;
        inst.prepares.clear();
        inst.commits.clear();
        let proposal = payload.proposal().expect("validated").clone();

        let mut seen = BTreeSet::new();
        let unique: Vec<&Transaction> = proposal.txs.iter().filter(|tx| seen.insert(tx.txid())).collect();
        let duplicates = proposal.txs.len() - unique.len();
        let policy = FilterPolicy { allow_chained: self.cfg.allow_chained, sigs: SigPolicy::Cached(&self.sigs) };
        let outcome = filter_conflicts_with(&self.table, unique.iter().copied(), policy);
        let mut rejected: BTreeMap<ValidationVerdict, usize> = BTreeMap::new();
        for (_, v) in &outcome.rejected {
            *rejected.entry(*v).or_default() += 1;
        }
        let mut included = Bitmap::new(self.cfg.params.n);
        included.set(self.cfg.leader.index(), true);
        let block = Block { index: k, prev: self.last_hash, txs: outcome.included, meta: BlockMeta { instance: k, included } };
        if self.table.apply_block_in_place(&block).is_err() {
            self.log.apply_errors += 1;
        }
        if !self.table.is_conserved() {
            self.log.conservation_violations += 1;
        }
        let hash = block.hash();
        let committed: HashSet<Digest> = block.txs.iter().map(Transaction::txid).collect();
        self.mempool.purge(&committed, &self.table);
        if self.cfg.record_txs {
            self.log.txs.extend(block.txs.iter().map(|tx| TxRecord::of(tx, k)));
        }
        self.log.verified.insert(k, (0..unique.len() as u32).collect());
        self.log.blocks.push(BlockRecord {
            index: k,
            hash,
            prev: block.prev,
            proposals: block.meta.included.to_string_bits(),
            proposals_included: 1,
            proposed_txs: proposal.txs.len(),
            valid_txs: block.txs.len(),
            invalid_txs: proposal.txs.len() - block.txs.len(),
            duplicates,
            rejected,
            started_at_us: started_at,
            decided_at_us: decided_at,
            committed_at_us: fx.now(),
            consensus_hop: hop,
            commit_hop: hop,
        });
        self.last_hash = hash;
        fx.milestone(k);
        self.start_round(fx, k + 1);
    }
}
