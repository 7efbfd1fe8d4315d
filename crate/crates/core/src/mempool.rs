//! A proposer's FIFO buffer of structurally valid transactions.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::crypto::Digest;
use crate::ledger::UtxoTable;
use crate::types::Transaction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AdmitError {
    #[error("transaction already in the pool")]
    Duplicate,
    #[error("transaction is malformed")]
    Malformed,
}

#[derive(Debug, Clone)]
struct Entry {
    tx: Transaction,
    eligible_round: u64,
    proposed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Mempool {
    entries: BTreeMap<u64, Entry>,
    by_txid: HashMap<Digest, u64>,
    next_seq: u64,
    pub rejected_duplicates: u64,
    pub rejected_malformed: u64,
}

impl Mempool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, txid: &Digest) -> bool {
        self.by_txid.contains_key(txid)
    }

    /// Stateless admission; the transaction may be proposed from
    /// `eligible_round` on.
    pub fn admit(&mut self, tx: Transaction, eligible_round: u64) -> Result<(), AdmitError> {
        if !tx.is_well_formed() {
            self.rejected_malformed += 1;
            return Err(AdmitError::Malformed);
        }
        let txid = tx.txid();
        if self.by_txid.contains_key(&txid) {
            self.rejected_duplicates += 1;
            return Err(AdmitError::Duplicate);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.by_txid.insert(txid, seq);
        self.entries.insert(seq, Entry { tx, eligible_round, proposed: false });
        Ok(())
    }

    /// Oldest `max` eligible transactions not already in flight. They stay
    /// in the pool until [`Mempool::purge`] sees them committed.
    pub fn take(&mut self, round: u64, max: usize) -> Vec<Transaction> {
        let mut out = Vec::new();
        for e in self.entries.values_mut() {
            if out.len() == max {
                break;
            }
            if !e.proposed && e.eligible_round <= round {
                e.proposed = true;
                out.push(e.tx.clone());
            }
        }
        out
    }

    /// Drops committed transactions and those whose inputs are gone, and
    /// makes the rest proposable again.
    pub fn purge(&mut self, committed: &HashSet<Digest>, table: &UtxoTable) {
        let by_txid = &mut self.by_txid;
        self.entries.retain(|_, e| {
            let txid = e.tx.txid();
            let keep = !committed.contains(&txid) && e.tx.inputs.iter().all(|i| table.contains(&i.prev));
            if keep {
                e.proposed = false;
            } else {
                by_txid.remove(&txid);
            }
            keep
        });
    }
}
