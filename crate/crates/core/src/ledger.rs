//! UTXO table, transaction validation and deterministic conflict filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{verify_digest, Account, SigCache};
use crate::types::{Amount, Block, Genesis, OutPoint, Transaction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationVerdict {
    Valid,
    BadSignature,
    MissingInput,
    DoubleSpendWithinBlock,
    OverSpend,
    Malformed,
}

impl ValidationVerdict {
    pub const ALL: [ValidationVerdict; 6] = [
        ValidationVerdict::Valid,
        ValidationVerdict::BadSignature,
        ValidationVerdict::MissingInput,
        ValidationVerdict::DoubleSpendWithinBlock,
        ValidationVerdict::OverSpend,
        ValidationVerdict::Malformed,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_valid(self) -> bool {
        self == ValidationVerdict::Valid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtxoEntry {
    pub amount: Amount,
    pub owner: Account,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Utxo {
    pub outpoint: OutPoint,
    pub amount: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("block {block}: transaction {position} is not applicable ({verdict:?})")]
    InvalidTransaction { block: u64, position: usize, verdict: ValidationVerdict },
}

/// Map from outpoint to (amount, owner) with an owner index for reads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UtxoTable {
    entries: BTreeMap<OutPoint, UtxoEntry>,
    by_owner: BTreeMap<Account, BTreeSet<OutPoint>>,
    genesis_supply: Amount,
    circulating: Amount,
    /// Input value not reassigned to any output.
    unclaimed: Amount,
}

impl UtxoTable {
    pub fn from_genesis(genesis: &Genesis) -> Self {
        let id = genesis.id();
        let mut table = UtxoTable::default();
        for (i, (owner, amount)) in genesis.entries.iter().enumerate() {
            table.insert(genesis.outpoint(id, i), UtxoEntry { amount: *amount, owner: *owner });
        }
        table.genesis_supply = table.circulating;
        table
    }

    fn insert(&mut self, op: OutPoint, entry: UtxoEntry) {
        debug_assert!(entry.amount > 0);
        self.circulating += entry.amount;
        self.by_owner.entry(entry.owner).or_default().insert(op);
        self.entries.insert(op, entry);
    }

    fn remove(&mut self, op: &OutPoint) -> Option<UtxoEntry> {
        let entry = self.entries.remove(op)?;
        self.circulating -= entry.amount;
        if let Some(set) = self.by_owner.get_mut(&entry.owner) {
            set.remove(op);
            if set.is_empty() {
                self.by_owner.remove(&entry.owner);
            }
        }
        Some(entry)
    }

    pub fn get(&self, op: &OutPoint) -> Option<&UtxoEntry> {
        self.entries.get(op)
    }

    pub fn contains(&self, op: &OutPoint) -> bool {
        self.entries.contains_key(op)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn genesis_supply(&self) -> Amount {
        self.genesis_supply
    }

    /// Sum of all unspent outputs.
    pub fn circulating(&self) -> Amount {
        self.circulating
    }

    /// Circulating value plus value consumed but not reassigned.
    pub fn total_supply(&self) -> Amount {
        self.circulating + self.unclaimed
    }

    pub fn unclaimed(&self) -> Amount {
        self.unclaimed
    }

    /// No coins minted and none lost from the books since genesis.
    pub fn is_conserved(&self) -> bool {
        self.total_supply() == self.genesis_supply
            && self.entries.values().map(|e| e.amount).sum::<Amount>() == self.circulating
    }

    pub fn balance(&self, account: &Account) -> Amount {
        self.by_owner
            .get(account)
            .map(|ops| ops.iter().map(|op| self.entries[op].amount).sum())
            .unwrap_or(0)
    }

    /// Outputs owned by `account` in (txid, index) order.
    pub fn request_utxos(&self, account: &Account) -> Vec<Utxo> {
        self.by_owner
            .get(account)
            .map(|ops| {
                ops.iter()
                    .map(|op| Utxo { outpoint: *op, amount: self.entries[op].amount })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Applies a conflict-filtered block, consuming the old table.
    pub fn apply_block(mut self, block: &Block) -> Result<UtxoTable, LedgerError> {
        self.apply_block_in_place(block)?;
        Ok(self)
    }

    /// In-place variant of [`UtxoTable::apply_block`]. On error the table is
    /// left partially applied; callers treat that as fatal.
    pub fn apply_block_in_place(&mut self, block: &Block) -> Result<(), LedgerError> {
        for (position, tx) in block.txs.iter().enumerate() {
            self.apply_tx(tx).map_err(|verdict| LedgerError::InvalidTransaction {
                block: block.index,
                position,
                verdict,
            })?;
        }
        Ok(())
    }

    fn apply_tx(&mut self, tx: &Transaction) -> Result<(), ValidationVerdict> {
        if !tx.is_well_formed() {
            return Err(ValidationVerdict::Malformed);
        }
        let mut input_sum: Amount = 0;
        for input in &tx.inputs {
            let entry = self.get(&input.prev).ok_or(ValidationVerdict::MissingInput)?;
            if entry.owner != Account::of(&input.spender) {
                return Err(ValidationVerdict::BadSignature);
            }
            input_sum = input_sum.checked_add(entry.amount).ok_or(ValidationVerdict::Malformed)?;
        }
        let output_sum = tx.output_sum().ok_or(ValidationVerdict::Malformed)?;
        if output_sum > input_sum {
            return Err(ValidationVerdict::OverSpend);
        }
        for input in &tx.inputs {
            self.remove(&input.prev);
        }
        let txid = tx.txid();
        for (i, out) in tx.outputs.iter().enumerate() {
            self.insert(OutPoint { txid, index: i as u32 }, UtxoEntry { amount: out.amount, owner: out.recipient });
        }
        self.unclaimed += input_sum - output_sum;
        Ok(())
    }
}

/// How input signatures are checked during validation.
#[derive(Clone, Copy)]
pub enum SigPolicy<'a> {
    /// Run ECDSA verification.
    Verify,
    /// Run ECDSA verification through a shared memo.
    Cached(&'a SigCache),
    /// Signatures were already attested valid by a verifier quorum; only the
    /// spender key is matched against the output owner.
    Trusted,
}

#[derive(Clone, Copy)]
pub struct FilterPolicy<'a> {
    /// Whether a transaction may spend an output created earlier in the same
    /// block.
    pub allow_chained: bool,
    pub sigs: SigPolicy<'a>,
}

impl Default for FilterPolicy<'_> {
    fn default() -> Self {
        FilterPolicy { allow_chained: true, sigs: SigPolicy::Verify }
    }
}

/// Table-independent part of validation: structure and signatures over the
/// sighash with the keys the inputs name. This is the work sharded across
/// verifiers.
pub fn check_signatures(tx: &Transaction, sigs: SigPolicy<'_>) -> ValidationVerdict {
    if !tx.is_well_formed() {
        return ValidationVerdict::Malformed;
    }
    if matches!(sigs, SigPolicy::Trusted) {
        return ValidationVerdict::Valid;
    }
    let digest = tx.sighash();
    let ok = tx.inputs.iter().all(|i| match sigs {
        SigPolicy::Verify => verify_digest(&i.spender, &digest, &i.signature),
        SigPolicy::Cached(cache) => cache.verify_digest(&i.spender, &digest, &i.signature),
        SigPolicy::Trusted => true,
    });
    if ok {
        ValidationVerdict::Valid
    } else {
        ValidationVerdict::BadSignature
    }
}

pub fn validate(table: &UtxoTable, tx: &Transaction) -> ValidationVerdict {
    validate_with(table, tx, SigPolicy::Verify)
}

pub fn validate_with(table: &UtxoTable, tx: &Transaction, sigs: SigPolicy<'_>) -> ValidationVerdict {
    Scan::new(table, FilterPolicy { allow_chained: false, sigs }).check(tx)
}

/// Running state of one first-spender-wins pass over a block.
struct Scan<'t, 'p> {
    table: &'t UtxoTable,
    policy: FilterPolicy<'p>,
    spent: HashSet<OutPoint>,
    created: HashMap<OutPoint, UtxoEntry>,
}

impl<'t, 'p> Scan<'t, 'p> {
    fn new(table: &'t UtxoTable, policy: FilterPolicy<'p>) -> Self {
        Scan { table, policy, spent: HashSet::new(), created: HashMap::new() }
    }

    fn lookup(&self, op: &OutPoint) -> Result<UtxoEntry, ValidationVerdict> {
        if self.spent.contains(op) {
            return Err(ValidationVerdict::DoubleSpendWithinBlock);
        }
        if let Some(e) = self.created.get(op) {
            return if self.policy.allow_chained {
                Ok(*e)
            } else {
                Err(ValidationVerdict::MissingInput)
            };
        }
        self.table.get(op).copied().ok_or(ValidationVerdict::MissingInput)
    }

    fn check(&self, tx: &Transaction) -> ValidationVerdict {
        if !tx.is_well_formed() {
            return ValidationVerdict::Malformed;
        }
        let mut input_sum: Amount = 0;
        for input in &tx.inputs {
            let entry = match self.lookup(&input.prev) {
                Ok(e) => e,
                Err(v) => return v,
            };
            if entry.owner != Account::of(&input.spender) {
                return ValidationVerdict::BadSignature;
            }
            input_sum = match input_sum.checked_add(entry.amount) {
                Some(s) => s,
                None => return ValidationVerdict::Malformed,
            };
        }
        let sig = check_signatures(tx, self.policy.sigs);
        if !sig.is_valid() {
            return sig;
        }
        match tx.output_sum() {
            Some(out) if out <= input_sum => ValidationVerdict::Valid,
            Some(_) => ValidationVerdict::OverSpend,
            None => ValidationVerdict::Malformed,
        }
    }

    fn include(&mut self, tx: &Transaction) {
        for input in &tx.inputs {
            self.created.remove(&input.prev);
            self.spent.insert(input.prev);
        }
        let txid = tx.txid();
        for (i, out) in tx.outputs.iter().enumerate() {
            self.created
                .insert(OutPoint { txid, index: i as u32 }, UtxoEntry { amount: out.amount, owner: out.recipient });
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub included: Vec<Transaction>,
    pub rejected: Vec<(Transaction, ValidationVerdict)>,
}

/// First-spender-wins scan with full signature verification and chained
/// spends allowed.
pub fn filter_conflicts(table: &UtxoTable, ordered_txs: &[Transaction]) -> FilterOutcome {
    filter_conflicts_with(table, ordered_txs, FilterPolicy::default())
}

/// A transaction is included iff it is valid against `table` updated by all
/// transactions included before it in this scan.
pub fn filter_conflicts_with<'a, I>(table: &UtxoTable, ordered_txs: I, policy: FilterPolicy<'_>) -> FilterOutcome
where
    I: IntoIterator<Item = &'a Transaction>,
{
    let mut scan = Scan::new(table, policy);
    let mut outcome = FilterOutcome::default();
    for tx in ordered_txs {
        match scan.check(tx) {
            ValidationVerdict::Valid => {
                scan.include(tx);
                outcome.included.push(tx.clone());
            }
            verdict => outcome.rejected.push((tx.clone(), verdict)),
        }
    }
    outcome
}
