//! Sharded signature verification of a decided candidate.
//!
//! Each transaction has a ring window of `t + 1` primary verifiers and `t`
//! extension verifiers derived from its txid and the instance. Verifiers
//! publish one signed [`AttestationBatch`] per batch of work; a verdict is
//! final once `t + 1` assigned verifiers agree on it.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::crypto::{Digest, KeyPair};
use crate::ledger::{check_signatures, SigPolicy, ValidationVerdict};
use crate::message::AttestationBatch;
use crate::types::{placement_hash, Bitmap, NodeId, Transaction};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierAssignment {
    pub primary: Vec<NodeId>,
    pub extension: Vec<NodeId>,
}

impl VerifierAssignment {
    pub fn is_primary(&self, id: NodeId) -> bool {
        self.primary.contains(&id)
    }

    pub fn is_extension(&self, id: NodeId) -> bool {
        self.extension.contains(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.is_primary(id) || self.is_extension(id)
    }
}

/// Ring window starting at `h = hash(txid || instance) mod n`.
pub fn assign(txid: &Digest, instance: u64, n: usize, t: usize) -> VerifierAssignment {
    let h = (placement_hash(b"rbbc-verify", txid, instance) % n as u64) as usize;
    assign_from(h, n, t)
}

pub fn assign_from(h: usize, n: usize, t: usize) -> VerifierAssignment {
    let at = |k: usize| NodeId(((h + k) % n) as u32);
    VerifierAssignment {
        primary: (0..=t).map(at).collect(),
        extension: (t + 1..=2 * t).map(at).collect(),
    }
}

/// Verdict backed by at least `t + 1` identical votes, if any. Votes must
/// already be deduplicated per verifier and restricted to assigned ones.
pub fn finalize(votes: &[ValidationVerdict], t: usize) -> Option<ValidationVerdict> {
    ValidationVerdict::ALL
        .into_iter()
        .find(|v| votes.iter().filter(|x| *x == v).count() > t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOutcome {
    Accepted { newly_final: usize },
    /// Wrong instance, wrong candidate shape, or bad signature.
    Rejected,
}

/// Per-node verification bookkeeping for one instance.
#[derive(Debug, Clone)]
pub struct ShardState {
    instance: u64,
    n: usize,
    t: usize,
    me: NodeId,
    txs: Arc<Vec<Transaction>>,
    proposers: Bitmap,
    assignments: Vec<VerifierAssignment>,
    votes: Vec<BTreeMap<NodeId, (ValidationVerdict, u32)>>,
    finalized: Vec<Option<(ValidationVerdict, u32)>>,
    remaining: usize,
    verified: Vec<bool>,
    /// Per-position votes from nodes outside the assignment.
    pub ignored_attestations: u64,
    pub rejected_batches: u64,
}

impl ShardState {
    pub fn new(instance: u64, n: usize, t: usize, me: NodeId, txs: Arc<Vec<Transaction>>, proposers: Bitmap) -> Self {
        let assignments: Vec<_> = txs.iter().map(|tx| assign(&tx.txid(), instance, n, t)).collect();
        let len = txs.len();
        ShardState {
            instance,
            n,
            t,
            me,
            txs,
            proposers,
            assignments,
            votes: vec![BTreeMap::new(); len],
            finalized: vec![None; len],
            remaining: len,
            verified: vec![false; len],
            ignored_attestations: 0,
            rejected_batches: 0,
        }
    }

    pub fn instance(&self) -> u64 {
        self.instance
    }

    pub fn len(&self) -> usize {
        self.txs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txs.is_empty()
    }

    pub fn txs(&self) -> &Arc<Vec<Transaction>> {
        &self.txs
    }

    pub fn assignment(&self, pos: usize) -> &VerifierAssignment {
        &self.assignments[pos]
    }

    pub fn primary_positions(&self, id: NodeId) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i].is_primary(id)).collect()
    }

    /// Primary work of every node, indexed by node id.
    pub fn primary_loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.n];
        for a in &self.assignments {
            for id in &a.primary {
                loads[id.index()] += 1;
            }
        }
        loads
    }

    /// Positions this node should verify as an extension verifier now: not
    /// yet final and not already verified here.
    pub fn escalation_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.finalized[i].is_none() && !self.verified[i] && self.assignments[i].is_extension(self.me))
            .collect()
    }

    /// Runs the table-free checks on `positions` and records them as
    /// verified by this node.
    pub fn verify(&mut self, positions: &[usize], sigs: SigPolicy<'_>) -> Vec<ValidationVerdict> {
        positions
            .iter()
            .map(|&i| {
                self.verified[i] = true;
                check_signatures(&self.txs[i], sigs)
            })
            .collect()
    }

    pub fn verified_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.verified.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }

    pub fn make_batch(&self, positions: &[usize], verdicts: Vec<ValidationVerdict>, key: &KeyPair) -> AttestationBatch {
        let mut covered = Bitmap::new(self.len());
        for &i in positions {
            covered.set(i, true);
        }
        // Verdicts must follow position order.
        let mut pairs: Vec<(usize, ValidationVerdict)> = positions.iter().copied().zip(verdicts).collect();
        pairs.sort_by_key(|(i, _)| *i);
        AttestationBatch::signed(
            self.instance,
            self.me,
            self.proposers.clone(),
            covered,
            pairs.into_iter().map(|(_, v)| v).collect(),
            key,
        )
    }

    /// Records a batch whose signature check result is `sig_ok`.
    pub fn on_batch(&mut self, batch: &AttestationBatch, sig_ok: bool, hop: u32) -> BatchOutcome {
        if !sig_ok
            || batch.instance != self.instance
            || batch.proposers != self.proposers
            || batch.covered.len() != self.len()
            || batch.verifier.index() >= self.n
        {
            self.rejected_batches += 1;
            return BatchOutcome::Rejected;
        }
        let mut newly_final = 0;
        for (pos, verdict) in batch.entries() {
            if !self.assignments[pos].contains(batch.verifier) {
                self.ignored_attestations += 1;
                continue;
            }
            self.votes[pos].entry(batch.verifier).or_insert((verdict, hop));
            if self.finalized[pos].is_some() {
                continue;
            }
            let votes: Vec<ValidationVerdict> = self.votes[pos].values().map(|(v, _)| *v).collect();
            if let Some(v) = finalize(&votes, self.t) {
                let hop = self.votes[pos].values().filter(|(x, _)| *x == v).map(|(_, h)| *h).max().unwrap_or(0);
                self.finalized[pos] = Some((v, hop));
                self.remaining -= 1;
                newly_final += 1;
            }
        }
        BatchOutcome::Accepted { newly_final }
    }

    pub fn is_complete(&self) -> bool {
        self.remaining == 0
    }

    pub fn verdict(&self, pos: usize) -> Option<ValidationVerdict> {
        self.finalized[pos].map(|(v, _)| v)
    }

    /// Deepest hop among the quorums that finalized the verdicts.
    pub fn finalize_hop(&self) -> u32 {
        self.finalized.iter().flatten().map(|(_, h)| *h).max().unwrap_or(0)
    }
}
