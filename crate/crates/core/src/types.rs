//! Domain types shared by every protocol module.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{put_u32, put_u64, Decode, DecodeError, Encode, Reader};
use crate::crypto::{hash, hash_parts, Account, Digest, KeyPair, PublicKey, Signature};

pub type Amount = u64;

/// Index of a permissioned node, `0..n`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerMode {
    /// Every node proposes.
    AllN,
    /// Only the `t + 1` lowest node ids propose.
    TPlus1,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParamsError {
    #[error("n = {n} does not tolerate t = {t}: need n >= 3t + 1")]
    Resilience { n: usize, t: usize },
    #[error("proposal size must be at least 1")]
    ZeroProposalSize,
    #[error("need at least one node")]
    NoNodes,
}

/// System parameters: node count, fault bound, proposal size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    pub n: usize,
    pub t: usize,
    pub beta: usize,
    pub proposer_mode: ProposerMode,
}

impl Params {
    pub fn new(n: usize, t: usize, beta: usize, proposer_mode: ProposerMode) -> Result<Self, ParamsError> {
        if n == 0 {
            return Err(ParamsError::NoNodes);
        }
        if n < 3 * t + 1 {
            return Err(ParamsError::Resilience { n, t });
        }
        if beta == 0 {
            return Err(ParamsError::ZeroProposalSize);
        }
        Ok(Params { n, t, beta, proposer_mode })
    }

    /// `t` defaulted to the largest integer strictly below `n / 3`.
    pub fn with_default_t(n: usize, beta: usize, proposer_mode: ProposerMode) -> Result<Self, ParamsError> {
        Self::new(n, default_t(n), beta, proposer_mode)
    }

    pub fn quorum(&self) -> usize {
        2 * self.t + 1
    }

    /// Designated proposers, ascending.
    pub fn proposers(&self) -> Vec<NodeId> {
        let count = match self.proposer_mode {
            ProposerMode::AllN => self.n,
            ProposerMode::TPlus1 => (self.t + 1).min(self.n),
        };
        (0..count as u32).map(NodeId).collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n as u32).map(NodeId)
    }
}

pub fn default_t(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n - 1) / 3
    }
}

/// Reference to one output of an earlier transaction (or of the genesis
/// allocation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: Digest,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TxInput {
    pub prev: OutPoint,
    pub signature: Signature,
    pub spender: PublicKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxOutput {
    pub amount: Amount,
    pub recipient: Account,
}

const INPUT_LEN: usize = 32 + 4 + 64 + 33;
const OUTPUT_LEN: usize = 8 + 32;

#[derive(Clone)]
pub struct Transaction {
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    pub nonce: u64,
    id: OnceLock<Digest>,
}

impl PartialEq for Transaction {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs && self.nonce == other.nonce
    }
}

impl Eq for Transaction {}

impl fmt::Debug for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transaction")
            .field("txid", &self.txid())
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("nonce", &self.nonce)
            .finish()
    }
}

impl Transaction {
    pub fn new(inputs: Vec<TxInput>, outputs: Vec<TxOutput>, nonce: u64) -> Self {
        Transaction { inputs, outputs, nonce, id: OnceLock::new() }
    }

    /// Builds a transaction where every input is signed by the matching key.
    pub fn signed(spends: &[(OutPoint, &KeyPair)], outputs: Vec<TxOutput>, nonce: u64) -> Self {
        let prevs: Vec<(OutPoint, PublicKey)> = spends.iter().map(|(op, kp)| (*op, *kp.public())).collect();
        let digest = sighash(&prevs, &outputs, nonce);
        let inputs = spends
            .iter()
            .map(|(op, kp)| TxInput { prev: *op, signature: kp.sign_digest(&digest), spender: *kp.public() })
            .collect();
        Transaction::new(inputs, outputs, nonce)
    }

    /// Hash of the canonical encoding.
    pub fn txid(&self) -> Digest {
        *self.id.get_or_init(|| hash(&self.encode()))
    }

    /// The digest every input signs: the transaction with signatures omitted.
    pub fn sighash(&self) -> Digest {
        let prevs: Vec<(OutPoint, PublicKey)> = self.inputs.iter().map(|i| (i.prev, i.spender)).collect();
        sighash(&prevs, &self.outputs, self.nonce)
    }

    pub fn output_sum(&self) -> Option<Amount> {
        self.outputs.iter().try_fold(0u64, |acc, o| acc.checked_add(o.amount))
    }

    /// Structural well-formedness: at least one input and output, positive
    /// amounts, no overflowing output sum, pairwise distinct inputs.
    pub fn is_well_formed(&self) -> bool {
        if self.inputs.is_empty() || self.outputs.is_empty() {
            return false;
        }
        if self.outputs.iter().any(|o| o.amount == 0) || self.output_sum().is_none() {
            return false;
        }
        let mut prevs: Vec<&OutPoint> = self.inputs.iter().map(|i| &i.prev).collect();
        prevs.sort();
        prevs.windows(2).all(|w| w[0] != w[1])
    }

    pub fn outpoint(&self, index: u32) -> OutPoint {
        OutPoint { txid: self.txid(), index }
    }
}

fn sighash(prevs: &[(OutPoint, PublicKey)], outputs: &[TxOutput], nonce: u64) -> Digest {
    let mut buf = Vec::with_capacity(8 + prevs.len() * 69 + outputs.len() * OUTPUT_LEN + 8);
    buf.extend_from_slice(b"rbbc-sighash");
    put_u32(&mut buf, prevs.len() as u32);
    for (op, pk) in prevs {
        buf.extend_from_slice(&op.txid.0);
        put_u32(&mut buf, op.index);
        buf.extend_from_slice(&pk.0);
    }
    put_u32(&mut buf, outputs.len() as u32);
    for o in outputs {
        put_u64(&mut buf, o.amount);
        buf.extend_from_slice(&o.recipient.0 .0);
    }
    put_u64(&mut buf, nonce);
    hash(&buf)
}

impl Encode for Transaction {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u32(out, self.inputs.len() as u32);
        for i in &self.inputs {
            out.extend_from_slice(&i.prev.txid.0);
            put_u32(out, i.prev.index);
            out.extend_from_slice(&i.signature.0);
            out.extend_from_slice(&i.spender.0);
        }
        put_u32(out, self.outputs.len() as u32);
        for o in &self.outputs {
            put_u64(out, o.amount);
            out.extend_from_slice(&o.recipient.0 .0);
        }
        put_u64(out, self.nonce);
    }

    fn encoded_len(&self) -> usize {
        4 + self.inputs.len() * INPUT_LEN + 4 + self.outputs.len() * OUTPUT_LEN + 8
    }
}

impl Decode for Transaction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n_in = r.len_prefix(INPUT_LEN)?;
        let mut inputs = Vec::with_capacity(n_in);
        for _ in 0..n_in {
            let txid = Digest::read(r)?;
            let index = r.u32()?;
            let signature = Signature(r.array()?);
            let spender = PublicKey(r.array()?);
            inputs.push(TxInput { prev: OutPoint { txid, index }, signature, spender });
        }
        let n_out = r.len_prefix(OUTPUT_LEN)?;
        let mut outputs = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            let amount = r.u64()?;
            let recipient = Account(Digest::read(r)?);
            outputs.push(TxOutput { amount, recipient });
        }
        let nonce = r.u64()?;
        Ok(Transaction::new(inputs, outputs, nonce))
    }
}

/// Consensus metadata carried by a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeta {
    pub instance: u64,
    /// Bit `i` set iff proposer `i`'s proposal was decided into the block.
    pub included: Bitmap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev: Digest,
    pub txs: Vec<Transaction>,
    pub meta: BlockMeta,
}

impl Block {
    pub fn hash(&self) -> Digest {
        hash(&self.encode())
    }
}

impl Encode for Block {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u64(out, self.index);
        out.extend_from_slice(&self.prev.0);
        put_u64(out, self.meta.instance);
        self.meta.included.encode_to(out);
        put_u32(out, self.txs.len() as u32);
        for tx in &self.txs {
            tx.encode_to(out);
        }
    }

    fn encoded_len(&self) -> usize {
        8 + 32 + 8 + self.meta.included.encoded_len() + 4 + self.txs.iter().map(Encode::encoded_len).sum::<usize>()
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let index = r.u64()?;
        let prev = Digest::read(r)?;
        let instance = r.u64()?;
        let included = Bitmap::decode_from(r)?;
        let count = r.len_prefix(16)?;
        let mut txs = Vec::with_capacity(count);
        for _ in 0..count {
            txs.push(Transaction::decode_from(r)?);
        }
        Ok(Block { index, prev, txs, meta: BlockMeta { instance, included } })
    }
}

/// Fixed-length bit vector, encoded as a `u32` bit count plus packed bytes
/// (LSB first). Unused high bits of the last byte must be zero.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Bitmap {
    len: usize,
    bytes: Vec<u8>,
}

impl Bitmap {
    pub fn new(len: usize) -> Self {
        Bitmap { len, bytes: vec![0; len.div_ceil(8)] }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Bitmap::new(bits.len());
        for (i, &v) in bits.iter().enumerate() {
            b.set(i, v);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.bytes[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        if v {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    pub fn to_string_bits(&self) -> String {
        (0..self.len).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitmap({})", self.to_string_bits())
    }
}

impl Encode for Bitmap {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u32(out, self.len as u32);
        out.extend_from_slice(&self.bytes);
    }

    fn encoded_len(&self) -> usize {
        4 + self.bytes.len()
    }
}

impl Decode for Bitmap {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let len = r.u32()? as usize;
        let bytes = r.take(len.div_ceil(8))?.to_vec();
        if len % 8 != 0 {
            if let Some(last) = bytes.last() {
                if last >> (len % 8) != 0 {
                    return Err(DecodeError::Invalid("bitmap padding bits set"));
                }
            }
        }
        Ok(Bitmap { len, bytes })
    }
}

/// The initial coin allocation. Entry `i` becomes the unspent output
/// `(genesis.id(), i)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Genesis {
    pub entries: Vec<(Account, Amount)>,
}

#[derive(Debug, Error)]
pub enum GenesisError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Genesis {
    pub fn id(&self) -> Digest {
        let mut buf = Vec::with_capacity(self.entries.len() * 40 + 16);
        buf.extend_from_slice(b"rbbc-genesis");
        put_u32(&mut buf, self.entries.len() as u32);
        for (acct, amount) in &self.entries {
            buf.extend_from_slice(&acct.0 .0);
            put_u64(&mut buf, *amount);
        }
        hash(&buf)
    }

    pub fn outpoint(&self, id: Digest, i: usize) -> OutPoint {
        OutPoint { txid: id, index: i as u32 }
    }

    pub fn total(&self) -> Amount {
        self.entries.iter().map(|(_, a)| *a).sum()
    }

    /// One `<account hex> <amount>` pair per line; `#` comments and blank
    /// lines are ignored.
    pub fn parse(text: &str) -> Result<Self, GenesisError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| GenesisError::Parse { line: i + 1, msg };
            let mut parts = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
            let (Some(acct), Some(amount), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected `<account hex> <amount>`".into()));
            };
            let acct = Digest::from_hex(acct).map_err(|e| err(format!("bad account: {e}")))?;
            let amount: Amount = amount.parse().map_err(|e| err(format!("bad amount: {e}")))?;
            if amount == 0 {
                return Err(err("amount must be positive".into()));
            }
            entries.push((Account(acct), amount));
        }
        Ok(Genesis { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (acct, amount) in &self.entries {
            s.push_str(&format!("{} {}\n", acct, amount));
        }
        s
    }
}

/// Domain-separated digest used for deterministic placement decisions.
pub fn placement_hash(domain: &[u8], digest: &Digest, instance: u64) -> u64 {
    hash_parts(&[domain, &digest.0, &instance.to_le_bytes()]).prefix_u64()
}
