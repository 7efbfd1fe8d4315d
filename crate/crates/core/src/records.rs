//! Per-node event logs from which run metrics are computed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::ledger::ValidationVerdict;
use crate::types::{Amount, NodeId, Transaction};

/// Summary of one finalized block as seen by one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: u64,
    pub hash: Digest,
    pub prev: Digest,
    /// Included-proposal bitmap as a 0/1 string, one char per proposer.
    pub proposals: String,
    pub proposals_included: usize,
    /// Transactions in included proposals, duplicates counted.
    pub proposed_txs: usize,
    pub valid_txs: usize,
    /// Duplicates plus attested-invalid plus conflict-rejected.
    pub invalid_txs: usize,
    pub duplicates: usize,
    pub rejected: BTreeMap<ValidationVerdict, usize>,
    pub started_at_us: u64,
    /// When the decided content was fixed locally.
    pub decided_at_us: u64,
    pub committed_at_us: u64,
    /// Hop depth at which the content was decided.
    pub consensus_hop: u32,
    /// Hop depth at which the block was final.
    pub commit_hop: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinRecord {
    pub instance: u64,
    pub proposer: NodeId,
    pub value: bool,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRecord {
    pub instance: u64,
    pub broadcaster: NodeId,
    pub targets: Vec<NodeId>,
}

/// Shape of a committed transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub txid: Digest,
    pub block: u64,
    pub inputs: usize,
    pub outputs: Vec<Amount>,
    /// Whether the last output pays back to the (single) spender.
    pub change_to_spender: bool,
}

impl TxRecord {
    pub fn of(tx: &Transaction, block: u64) -> Self {
        let spender = tx.inputs.first().map(|i| crate::crypto::Account::of(&i.spender));
        TxRecord {
            txid: tx.txid(),
            block,
            inputs: tx.inputs.len(),
            outputs: tx.outputs.iter().map(|o| o.amount).collect(),
            change_to_spender: tx.outputs.len() > 1 && tx.outputs.last().map(|o| Some(o.recipient)) == Some(spender),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeLog {
    pub blocks: Vec<BlockRecord>,
    pub bin: Vec<BinRecord>,
    pub fetches: Vec<FetchRecord>,
    /// Candidate positions whose signatures this node checked, per instance.
    pub verified: BTreeMap<u64, Vec<u32>>,
    /// Committed transactions; only kept when requested.
    pub txs: Vec<TxRecord>,
    pub conservation_violations: u64,
    pub apply_errors: u64,
    pub round_limit_hits: u64,
    pub max_bin_round: u32,
    pub ignored_attestations: u64,
    pub rejected_attestations: u64,
    pub malformed_inits: u64,
    pub mismatched_fetch_responses: u64,
    pub fetch_responses_sent: u64,
    pub verify_jobs: u64,
    pub escalations: u64,
    pub reads_served: u64,
}
