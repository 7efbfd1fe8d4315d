//! RBBC node: one reliable broadcast and one binary instance per proposer,
//! reduced to a superblock, then sharded verification and conflict
//! filtering produce the block.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use crate::binconsensus::{BinAction, BinInstance, BinParams};
use crate::crypto::{Digest, KeyPair, PublicKey, SigCache};
use crate::ledger::{filter_conflicts_with, FilterPolicy, SigPolicy, UtxoTable, ValidationVerdict};
use crate::mempool::Mempool;
use crate::message::{AttestationBatch, BinMessage, Message, Payload, Proposal, RbKey, RbMessage};
use crate::netsim::Effects;
use crate::rbcast::{RbAction, RbInstance, RbParams};
use crate::records::{BinRecord, BlockRecord, FetchRecord, NodeLog, TxRecord};
use crate::shardverify::{BatchOutcome, ShardState};
use crate::types::{Bitmap, Block, BlockMeta, Genesis, NodeId, Params, Transaction};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub params: Params,
    pub me: NodeId,
    pub node_keys: Arc<Vec<PublicKey>>,
    /// Virtual CPU time to verify one transaction.
    pub verify_cost_us: u64,
    pub bin_base_timeout_us: u64,
    pub fetch_timeout_us: u64,
    /// Slack added to the expected verification time before extension
    /// verifiers step in.
    pub escalation_margin_us: u64,
    pub r_max: u32,
    pub allow_chained: bool,
    /// Rounds a secondary proposer waits per rank before proposing a
    /// submitted transaction.
    pub backup_rounds: u64,
    pub record_txs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RbbcTimer {
    Fetch { instance: u64, broadcaster: NodeId, attempt: u32 },
    Bin { instance: u64, proposer: NodeId, round: u32 },
    VerifyDone { instance: u64, job: u32 },
    Escalate { instance: u64 },
}

struct Candidate {
    shard: ShardState,
    included: Bitmap,
    proposed_txs: usize,
    duplicates: usize,
    decided_at: u64,
    depth: u32,
}

struct Round {
    started_at: u64,
    rb: BTreeMap<NodeId, RbInstance>,
    bin: BTreeMap<NodeId, BinInstance>,
    delivered: BTreeMap<NodeId, (Arc<Proposal>, u32)>,
    zero_proposed: bool,
    cand: Option<Candidate>,
    pending_attest: Vec<(Arc<AttestationBatch>, u32)>,
    jobs: BTreeMap<u32, Vec<usize>>,
    next_job: u32,
    escalated: bool,
    finalized: bool,
}

impl Round {
    fn new(started_at: u64) -> Self {
        Round {
            started_at,
            rb: BTreeMap::new(),
            bin: BTreeMap::new(),
            delivered: BTreeMap::new(),
            zero_proposed: false,
            cand: None,
            pending_attest: Vec::new(),
            jobs: BTreeMap::new(),
            next_job: 0,
            escalated: false,
            finalized: false,
        }
    }
}

pub struct RbbcNode {
    cfg: NodeConfig,
    key: KeyPair,
    sigs: SigCache,
    proposers: Vec<NodeId>,
    table: UtxoTable,
    mempool: Mempool,
    last_hash: Digest,
    round: u64,
    rounds: BTreeMap<u64, Round>,
    future: BTreeMap<u64, Vec<(NodeId, Message, u32)>>,
    busy_until: u64,
    pub log: NodeLog,
}

fn broadcast<E: Effects<Message, RbbcTimer>>(fx: &mut E, n: usize, msg: Message, hop: u32) {
    for dst in 0..n {
        fx.send(dst, msg.clone(), hop);
    }
}

impl RbbcNode {
    pub fn new(cfg: NodeConfig, key: KeyPair, genesis: &Genesis, sigs: SigCache, preload: Vec<Transaction>) -> Self {
        let mut mempool = Mempool::new();
        for tx in preload {
            let _ = mempool.admit(tx, 0);
        }
        RbbcNode {
            proposers: cfg.params.proposers(),
            key,
            sigs,
            table: UtxoTable::from_genesis(genesis),
            mempool,
            last_hash: genesis.id(),
            round: 0,
            rounds: BTreeMap::new(),
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

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    fn n(&self) -> usize {
        self.cfg.params.n
    }

    fn is_proposer(&self, id: NodeId) -> bool {
        id.index() < self.proposers.len()
    }

    fn rb_params(&self) -> RbParams {
        RbParams {
            n: self.n(),
            t: self.cfg.params.t,
            me: self.cfg.me,
            max_txs: self.cfg.params.beta,
            fetch_timeout_us: self.cfg.fetch_timeout_us,
        }
    }

    fn bin_params(&self) -> BinParams {
        BinParams {
            n: self.n(),
            t: self.cfg.params.t,
            me: self.cfg.me,
            base_timeout_us: self.cfg.bin_base_timeout_us,
            r_max: self.cfg.r_max,
        }
    }

    pub fn start<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E) {
        self.start_round(fx, 1);
    }

    fn start_round<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64) {
        self.round = k;
        self.rounds.insert(k, Round::new(fx.now()));
        if self.is_proposer(self.cfg.me) {
            let txs = self.mempool.take(k, self.cfg.params.beta);
            let payload = Payload::from_proposal(Proposal { proposer: self.cfg.me, instance: k, txs });
            let key = RbKey { instance: k, broadcaster: self.cfg.me };
            let actions = self.rb_instance(k, self.cfg.me).broadcast(payload);
            self.apply_rb(fx, key, actions);
        }
        if let Some(buffered) = self.future.remove(&k) {
            for (from, msg, hop) in buffered {
                self.on_message(fx, from, msg, hop);
            }
        }
    }

    fn rb_instance(&mut self, k: u64, broadcaster: NodeId) -> &mut RbInstance {
        let p = self.rb_params();
        self.rounds
            .get_mut(&k)
            .expect("round state")
            .rb
            .entry(broadcaster)
            .or_insert_with(|| RbInstance::new(RbKey { instance: k, broadcaster }, p))
    }

    fn bin_instance(&mut self, k: u64, proposer: NodeId) -> &mut BinInstance {
        let p = self.bin_params();
        self.rounds
            .get_mut(&k)
            .expect("round state")
            .bin
            .entry(proposer)
            .or_insert_with(|| BinInstance::new(p))
    }

    pub fn on_message<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, from: NodeId, msg: Message, hop: u32) {
        if let Some(k) = msg.instance() {
            if k > self.round {
                self.future.entry(k).or_default().push((from, msg, hop));
                return;
            }
            if k == 0 || from.index() >= self.n() {
                return;
            }
        }
        match msg {
            Message::Rb(m) => {
                if !self.is_proposer(m.key.broadcaster) {
                    return;
                }
                let actions = self.rb_instance(m.key.instance, m.key.broadcaster).on_message(from, m.kind, hop);
                self.apply_rb(fx, m.key, actions);
            }
            Message::Bin(m) => {
                if !self.is_proposer(m.proposer) {
                    return;
                }
                let actions = self.bin_instance(m.instance, m.proposer).on_message(from, m.kind, m.round, m.value, hop);
                self.apply_bin(fx, m.instance, m.proposer, actions);
            }
            Message::Attest(batch) => self.on_attestation(fx, batch, hop),
            Message::Submit { tx, rank } => {
                let eligible = self.round + 1 + rank as u64 * self.cfg.backup_rounds;
                let _ = self.mempool.admit((*tx).clone(), eligible);
            }
            Message::ReadReq { poll, account } => {
                self.log.reads_served += 1;
                let utxos = Arc::new(self.table.request_utxos(&account));
                let resp = Message::ReadResp { poll, account, height: self.height(), utxos };
                fx.send(from.index(), resp, hop + 1);
            }
            Message::Cons1(_) | Message::ReadResp { .. } => {}
        }
    }

    pub fn on_timer<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, timer: RbbcTimer) {
        match timer {
            RbbcTimer::Fetch { instance, broadcaster, attempt } => {
                let actions = self.rb_instance(instance, broadcaster).on_fetch_timer(attempt);
                self.apply_rb(fx, RbKey { instance, broadcaster }, actions);
            }
            RbbcTimer::Bin { instance, proposer, round } => {
                let actions = self.bin_instance(instance, proposer).on_timer(round);
                self.apply_bin(fx, instance, proposer, actions);
            }
            RbbcTimer::VerifyDone { instance, job } => self.on_verify_done(fx, instance, job),
            RbbcTimer::Escalate { instance } => self.on_escalate(fx, instance),
        }
    }

    fn apply_rb<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, key: RbKey, actions: Vec<RbAction>) {
        let n = self.n();
        for a in actions {
            match a {
                RbAction::Broadcast { kind, hop } => broadcast(fx, n, Message::Rb(RbMessage { key, kind }), hop),
                RbAction::Send { to, kind, hop } => fx.send(to.index(), Message::Rb(RbMessage { key, kind }), hop),
                RbAction::FetchTimer { attempt, after_us } => fx.timer(
                    after_us,
                    RbbcTimer::Fetch { instance: key.instance, broadcaster: key.broadcaster, attempt },
                ),
                RbAction::Deliver { payload, hop } => self.on_delivered(fx, key, payload, hop),
            }
        }
    }

    fn apply_bin<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64, proposer: NodeId, actions: Vec<BinAction>) {
        let n = self.n();
        for a in actions {
            match a {
                BinAction::Broadcast { kind, round, value, hop } => {
                    let m = BinMessage { instance: k, proposer, round, kind, value };
                    broadcast(fx, n, Message::Bin(m), hop);
                }
                BinAction::Timer { round, after_us } => {
                    fx.timer(after_us, RbbcTimer::Bin { instance: k, proposer, round });
                }
                BinAction::RoundLimit { .. } => self.log.round_limit_hits += 1,
                BinAction::Decide { value, round, hop } => {
                    self.log.bin.push(BinRecord { instance: k, proposer, value, round });
                    self.log.max_bin_round = self.log.max_bin_round.max(round);
                    self.on_decided(fx, k, hop);
                }
            }
        }
    }

    fn on_delivered<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, key: RbKey, payload: Payload, hop: u32) {
        let k = key.instance;
        let Some(proposal) = payload.proposal().cloned() else {
            return;
        };
        let round = self.rounds.get_mut(&k).expect("round state");
        if round.finalized {
            return;
        }
        round.delivered.insert(key.broadcaster, (proposal, hop));
        let bin = self.bin_instance(k, key.broadcaster);
        if !bin.proposed() {
            let actions = bin.propose(true, hop);
            self.apply_bin(fx, k, key.broadcaster, actions);
        }
        self.try_candidate(fx, k);
    }

    fn on_decided<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64, hop: u32) {
        let t = self.cfg.params.t;
        let needed = self.proposers.len().saturating_sub(t).max(1);
        let round = self.rounds.get_mut(&k).expect("round state");
        if round.finalized {
            return;
        }
        let ones = round.bin.values().filter(|b| b.decided() == Some(true)).count();
        if ones >= needed && !round.zero_proposed {
            round.zero_proposed = true;
            for p in self.proposers.clone() {
                let bin = self.bin_instance(k, p);
                if !bin.proposed() {
                    let actions = bin.propose(false, hop);
                    self.apply_bin(fx, k, p, actions);
                }
            }
        }
        self.try_candidate(fx, k);
    }

    /// Fixes the candidate once every binary instance decided and every
    /// 1-decided proposal is held.
    fn try_candidate<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64) {
        let (n, t, me) = (self.n(), self.cfg.params.t, self.cfg.me);
        let round = self.rounds.get_mut(&k).expect("round state");
        if round.cand.is_some() || round.finalized {
            return;
        }
        let mut included = Bitmap::new(self.proposers.len());
        let mut depth = 0;
        for p in &self.proposers {
            let Some(bin) = round.bin.get(p) else { return };
            match bin.decided() {
                None => return,
                Some(false) => {}
                Some(true) => {
                    let Some((_, hop)) = round.delivered.get(p) else { return };
                    included.set(p.index(), true);
                    depth = depth.max(*hop);
                }
            }
            depth = depth.max(bin.decision_hop().unwrap_or(0));
        }
        let mut seen = HashSet::new();
        let mut txs = Vec::new();
        let mut proposed_txs = 0;
        for p in included.ones() {
            let (proposal, _) = &round.delivered[&NodeId(p as u32)];
            for tx in &proposal.txs {
                proposed_txs += 1;
                if seen.insert(tx.txid()) {
                    txs.push(tx.clone());
                }
            }
        }
        let duplicates = proposed_txs - txs.len();
        let shard = ShardState::new(k, n, t, me, Arc::new(txs), included.clone());
        let loads = shard.primary_loads();
        let mine = shard.primary_positions(me);
        round.cand = Some(Candidate { shard, included, proposed_txs, duplicates, decided_at: fx.now(), depth });
        let pending = std::mem::take(&mut round.pending_attest);

        if !mine.is_empty() {
            self.schedule_verify(fx, k, mine);
        }
        let max_load = loads.into_iter().max().unwrap_or(0) as u64;
        let deadline = max_load * self.cfg.verify_cost_us + self.cfg.escalation_margin_us;
        fx.timer(deadline, RbbcTimer::Escalate { instance: k });
        for (batch, hop) in pending {
            self.on_attestation(fx, batch, hop);
        }
        self.try_finalize(fx, k);
    }

    fn schedule_verify<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64, positions: Vec<usize>) {
        let now = fx.now();
        let start = self.busy_until.max(now);
        let done = start + positions.len() as u64 * self.cfg.verify_cost_us;
        self.busy_until = done;
        self.log.verify_jobs += 1;
        let round = self.rounds.get_mut(&k).expect("round state");
        let job = round.next_job;
        round.next_job += 1;
        round.jobs.insert(job, positions);
        fx.timer(done - now, RbbcTimer::VerifyDone { instance: k, job });
    }

    fn on_verify_done<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64, job: u32) {
        let n = self.n();
        let round = self.rounds.get_mut(&k).expect("round state");
        let positions = round.jobs.remove(&job).unwrap_or_default();
        if round.finalized {
            return;
        }
        let Some(cand) = round.cand.as_mut() else { return };
        let verdicts = cand.shard.verify(&positions, SigPolicy::Cached(&self.sigs));
        self.log.verified.entry(k).or_default().extend(positions.iter().map(|&i| i as u32));
        let batch = cand.shard.make_batch(&positions, verdicts, &self.key);
        let hop = cand.depth + 1;
        broadcast(fx, n, Message::Attest(Arc::new(batch)), hop);
    }

    fn on_escalate<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64) {
        let round = self.rounds.get_mut(&k).expect("round state");
        if round.finalized || round.escalated {
            return;
        }
        round.escalated = true;
        let Some(cand) = round.cand.as_ref() else { return };
        let positions = cand.shard.escalation_positions();
        if !positions.is_empty() {
            self.log.escalations += 1;
            self.schedule_verify(fx, k, positions);
        }
    }

    fn on_attestation<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, batch: Arc<AttestationBatch>, hop: u32) {
        let k = batch.instance;
        let Some(round) = self.rounds.get_mut(&k) else { return };
        if round.finalized {
            return;
        }
        let Some(cand) = round.cand.as_mut() else {
            round.pending_attest.push((batch, hop));
            return;
        };
        let sig_ok = self
            .cfg
            .node_keys
            .get(batch.verifier.index())
            .is_some_and(|pk| self.sigs.verify_digest(pk, &batch.signing_digest(), &batch.signature));
        if let BatchOutcome::Accepted { newly_final } = cand.shard.on_batch(&batch, sig_ok, hop) {
            if newly_final > 0 {
                self.try_finalize(fx, k);
            }
        }
    }

    fn try_finalize<E: Effects<Message, RbbcTimer>>(&mut self, fx: &mut E, k: u64) {
        let round = self.rounds.get_mut(&k).expect("round state");
        let Some(cand) = round.cand.as_ref() else { return };
        if round.finalized || !cand.shard.is_complete() {
            return;
        }
        round.finalized = true;
        let cand = round.cand.take().expect("candidate");
        let started_at = round.started_at;
        let shard = &cand.shard;

        let mut rejected: BTreeMap<ValidationVerdict, usize> = BTreeMap::new();
        let mut attested = Vec::new();
        for (i, tx) in shard.txs().iter().enumerate() {
            match shard.verdict(i).expect("complete") {
                ValidationVerdict::Valid => attested.push(tx),
                v => *rejected.entry(v).or_default() += 1,
            }
        }
        let policy = FilterPolicy { allow_chained: self.cfg.allow_chained, sigs: SigPolicy::Trusted };
        let outcome = filter_conflicts_with(&self.table, attested, policy);
        for (_, v) in &outcome.rejected {
            *rejected.entry(*v).or_default() += 1;
        }
        let block = Block {
            index: k,
            prev: self.last_hash,
            txs: outcome.included,
            meta: BlockMeta { instance: k, included: cand.included.clone() },
        };
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
        self.log.ignored_attestations += shard.ignored_attestations;
        self.log.rejected_attestations += shard.rejected_batches;
        let round = self.rounds.get_mut(&k).expect("round state");
        for (b, rb) in &round.rb {
            if !rb.fetch_targets.is_empty() {
                self.log.fetches.push(FetchRecord { instance: k, broadcaster: *b, targets: rb.fetch_targets.clone() });
            }
            self.log.malformed_inits += rb.malformed_inits;
            self.log.mismatched_fetch_responses += rb.mismatched_responses;
        }
        round.delivered.clear();
        self.log.blocks.push(BlockRecord {
            index: k,
            hash,
            prev: block.prev,
            proposals: cand.included.to_string_bits(),
            proposals_included: cand.included.count_ones(),
            proposed_txs: cand.proposed_txs,
            valid_txs: block.txs.len(),
            invalid_txs: cand.proposed_txs - block.txs.len(),
            duplicates: cand.duplicates,
            rejected,
            started_at_us: started_at,
            decided_at_us: cand.decided_at,
            committed_at_us: fx.now(),
            consensus_hop: cand.depth,
            commit_hop: cand.depth.max(shard.finalize_hop()),
        });
        self.last_hash = hash;
        fx.milestone(k);
        self.start_round(fx, k + 1);
    }

    /// Totals that are only final once the run is over.
    pub fn finish_log(&mut self) {
        let mut sent = 0;
        for round in self.rounds.values() {
            for rb in round.rb.values() {
                sent += rb.fetch_responses_sent;
            }
        }
        self.log.fetch_responses_sent = sent;
    }
}
