//! Wire messages exchanged by nodes and requesters.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::codec::{put_bytes, put_u32, put_u64, Decode, DecodeError, Encode, Reader};
use crate::crypto::{hash, Account, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::{Utxo, ValidationVerdict};
use crate::types::{Bitmap, NodeId, OutPoint, Transaction};

/// A proposer's batch for one consensus instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub proposer: NodeId,
    pub instance: u64,
    pub txs: Vec<Transaction>,
}

impl Encode for Proposal {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u32(out, self.proposer.0);
        put_u64(out, self.instance);
        put_u32(out, self.txs.len() as u32);
        for tx in &self.txs {
            tx.encode_to(out);
        }
    }

    fn encoded_len(&self) -> usize {
        16 + self.txs.iter().map(Encode::encoded_len).sum::<usize>()
    }
}

impl Decode for Proposal {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let proposer = NodeId(r.u32()?);
        let instance = r.u64()?;
        let count = r.len_prefix(1)?;
        let mut txs = Vec::with_capacity(count);
        for _ in 0..count {
            txs.push(Transaction::decode_from(r)?);
        }
        Ok(Proposal { proposer, instance, txs })
    }
}

/// Opaque broadcast payload with its digest.
///
/// Cloning is cheap. The digest and the decoded proposal are computed once
/// per distinct byte string and shared by every holder, which is what each
/// receiver would compute independently.
#[derive(Clone)]
pub struct Payload(Arc<PayloadInner>);

struct PayloadInner {
    bytes: Vec<u8>,
    digest: Digest,
    proposal: OnceLock<Option<Arc<Proposal>>>,
}

impl Payload {
    pub fn new(bytes: Vec<u8>) -> Self {
        let digest = hash(&bytes);
        Payload(Arc::new(PayloadInner { bytes, digest, proposal: OnceLock::new() }))
    }

    pub fn from_proposal(p: Proposal) -> Self {
        let bytes = p.encode();
        let payload = Payload::new(bytes);
        let _ = payload.0.proposal.set(Some(Arc::new(p)));
        payload
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0.bytes
    }

    pub fn len(&self) -> usize {
        self.0.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.bytes.is_empty()
    }

    pub fn digest(&self) -> Digest {
        self.0.digest
    }

    /// The payload decoded as a proposal, or `None` if it does not decode.
    pub fn proposal(&self) -> Option<&Arc<Proposal>> {
        self.0
            .proposal
            .get_or_init(|| Proposal::decode(&self.0.bytes).ok().map(Arc::new))
            .as_ref()
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        self.0.digest == other.0.digest && self.0.bytes == other.0.bytes
    }
}

impl Eq for Payload {}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({} bytes, {:?})", self.len(), self.0.digest)
    }
}

/// Identifies one reliable-broadcast instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RbKey {
    pub instance: u64,
    pub broadcaster: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RbKind {
    Init(Payload),
    Echo(Digest),
    Ready(Digest),
    FetchReq(Digest),
    FetchResp(Payload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RbMessage {
    pub key: RbKey,
    pub kind: RbKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinKind {
    Est,
    Aux,
    Coord,
}

/// Message of the binary instance deciding whether `proposer`'s proposal
/// for `instance` enters the superblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinMessage {
    pub instance: u64,
    pub proposer: NodeId,
    pub round: u32,
    pub kind: BinKind,
    pub value: bool,
}

/// One verifier's verdicts on the candidate positions it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationBatch {
    pub instance: u64,
    pub verifier: NodeId,
    /// Proposers whose proposals form the candidate.
    pub proposers: Bitmap,
    /// Candidate positions covered by this batch.
    pub covered: Bitmap,
    /// One verdict per covered position, in position order.
    pub verdicts: Vec<ValidationVerdict>,
    pub signature: Signature,
}

impl AttestationBatch {
    pub fn signed(
        instance: u64,
        verifier: NodeId,
        proposers: Bitmap,
        covered: Bitmap,
        verdicts: Vec<ValidationVerdict>,
        key: &KeyPair,
    ) -> Self {
        let mut batch = AttestationBatch {
            instance,
            verifier,
            proposers,
            covered,
            verdicts,
            signature: Signature([0; 64]),
        };
        batch.signature = key.sign_digest(&batch.signing_digest());
        batch
    }

    pub fn signing_digest(&self) -> Digest {
        let mut buf = b"rbbc-attest".to_vec();
        self.encode_body(&mut buf);
        hash(&buf)
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        crate::crypto::verify_digest(key, &self.signing_digest(), &self.signature)
    }

    /// `(position, verdict)` pairs in position order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, ValidationVerdict)> + '_ {
        self.covered.ones().zip(self.verdicts.iter().copied())
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        put_u64(out, self.instance);
        put_u32(out, self.verifier.0);
        self.proposers.encode_to(out);
        self.covered.encode_to(out);
        out.extend(pack_verdicts(&self.verdicts));
    }
}

fn pack_verdicts(v: &[ValidationVerdict]) -> Vec<u8> {
    v.chunks(2)
        .map(|c| c[0].code() | c.get(1).map_or(0, |x| x.code() << 4))
        .collect()
}

fn unpack_verdicts(bytes: &[u8], count: usize) -> Result<Vec<ValidationVerdict>, DecodeError> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let nibble = (bytes[i / 2] >> (4 * (i % 2))) & 0x0f;
        out.push(
            ValidationVerdict::from_code(nibble)
                .ok_or(DecodeError::InvalidTag { what: "verdict", tag: nibble })?,
        );
    }
    if count % 2 == 1 && bytes[count / 2] >> 4 != 0 {
        return Err(DecodeError::Invalid("nonzero verdict padding"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cons1Kind {
    PrePrepare(Payload),
    Prepare(Digest),
    Commit(Digest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cons1Message {
    pub instance: u64,
    pub kind: Cons1Kind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Rb(RbMessage),
    Bin(BinMessage),
    Attest(Arc<AttestationBatch>),
    Cons1(Cons1Message),
    /// Requester submission; `rank` 0 marks the primary proposer.
    Submit { tx: Arc<Transaction>, rank: u8 },
    ReadReq { poll: u64, account: Account },
    ReadResp { poll: u64, account: Account, height: u64, utxos: Arc<Vec<Utxo>> },
}

/// Traffic class used for byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgClass {
    RbInit,
    RbEcho,
    RbReady,
    RbFetchReq,
    RbFetchResp,
    BinEst,
    BinAux,
    BinCoord,
    Attest,
    PrePrepare,
    Prepare,
    Commit,
    Submit,
    ReadReq,
    ReadResp,
}

impl MsgClass {
    pub fn is_rb(self) -> bool {
        matches!(
            self,
            MsgClass::RbInit | MsgClass::RbEcho | MsgClass::RbReady | MsgClass::RbFetchReq | MsgClass::RbFetchResp
        )
    }

    pub fn is_bin(self) -> bool {
        matches!(self, MsgClass::BinEst | MsgClass::BinAux | MsgClass::BinCoord)
    }

    pub fn is_cons1(self) -> bool {
        matches!(self, MsgClass::PrePrepare | MsgClass::Prepare | MsgClass::Commit)
    }
}

impl Message {
    pub fn class(&self) -> MsgClass {
        match self {
            Message::Rb(m) => match m.kind {
                RbKind::Init(_) => MsgClass::RbInit,
                RbKind::Echo(_) => MsgClass::RbEcho,
                RbKind::Ready(_) => MsgClass::RbReady,
                RbKind::FetchReq(_) => MsgClass::RbFetchReq,
                RbKind::FetchResp(_) => MsgClass::RbFetchResp,
            },
            Message::Bin(m) => match m.kind {
                BinKind::Est => MsgClass::BinEst,
                BinKind::Aux => MsgClass::BinAux,
                BinKind::Coord => MsgClass::BinCoord,
            },
            Message::Attest(_) => MsgClass::Attest,
            Message::Cons1(m) => match m.kind {
                Cons1Kind::PrePrepare(_) => MsgClass::PrePrepare,
                Cons1Kind::Prepare(_) => MsgClass::Prepare,
                Cons1Kind::Commit(_) => MsgClass::Commit,
            },
            Message::Submit { .. } => MsgClass::Submit,
            Message::ReadReq { .. } => MsgClass::ReadReq,
            Message::ReadResp { .. } => MsgClass::ReadResp,
        }
    }

    /// Consensus instance the message belongs to, if any.
    pub fn instance(&self) -> Option<u64> {
        match self {
            Message::Rb(m) => Some(m.key.instance),
            Message::Bin(m) => Some(m.instance),
            Message::Attest(a) => Some(a.instance),
            Message::Cons1(m) => Some(m.instance),
            _ => None,
        }
    }
}

const TAG_RB: u8 = 0;
const TAG_BIN: u8 = 1;
const TAG_ATTEST: u8 = 2;
const TAG_CONS1: u8 = 3;
const TAG_SUBMIT: u8 = 4;
const TAG_READ_REQ: u8 = 5;
const TAG_READ_RESP: u8 = 6;

const UTXO_LEN: usize = 32 + 4 + 8;

impl Encode for Message {
    fn encode_to(&self, out: &mut Vec<u8>) {
        match self {
            Message::Rb(m) => {
                out.push(TAG_RB);
                put_u64(out, m.key.instance);
                put_u32(out, m.key.broadcaster.0);
                match &m.kind {
                    RbKind::Init(p) => {
                        out.push(0);
                        put_bytes(out, p.bytes());
                    }
                    RbKind::Echo(d) => {
                        out.push(1);
                        out.extend_from_slice(&d.0);
                    }
                    RbKind::Ready(d) => {
                        out.push(2);
                        out.extend_from_slice(&d.0);
                    }
                    RbKind::FetchReq(d) => {
                        out.push(3);
                        out.extend_from_slice(&d.0);
                    }
                    RbKind::FetchResp(p) => {
                        out.push(4);
                        put_bytes(out, p.bytes());
                    }
                }
            }
            Message::Bin(m) => {
                out.push(TAG_BIN);
                put_u64(out, m.instance);
                put_u32(out, m.proposer.0);
                put_u32(out, m.round);
                out.push(match m.kind {
                    BinKind::Est => 0,
                    BinKind::Aux => 1,
                    BinKind::Coord => 2,
                });
                out.push(m.value as u8);
            }
            Message::Attest(a) => {
                out.push(TAG_ATTEST);
                a.encode_body(out);
                out.extend_from_slice(&a.signature.0);
            }
            Message::Cons1(m) => {
                out.push(TAG_CONS1);
                put_u64(out, m.instance);
                match &m.kind {
                    Cons1Kind::PrePrepare(p) => {
                        out.push(0);
                        put_bytes(out, p.bytes());
                    }
                    Cons1Kind::Prepare(d) => {
                        out.push(1);
                        out.extend_from_slice(&d.0);
                    }
                    Cons1Kind::Commit(d) => {
                        out.push(2);
                        out.extend_from_slice(&d.0);
                    }
                }
            }
            Message::Submit { tx, rank } => {
                out.push(TAG_SUBMIT);
                out.push(*rank);
                tx.encode_to(out);
            }
            Message::ReadReq { poll, account } => {
                out.push(TAG_READ_REQ);
                put_u64(out, *poll);
                out.extend_from_slice(&account.0 .0);
            }
            Message::ReadResp { poll, account, height, utxos } => {
                out.push(TAG_READ_RESP);
                put_u64(out, *poll);
                out.extend_from_slice(&account.0 .0);
                put_u64(out, *height);
                put_u32(out, utxos.len() as u32);
                for u in utxos.iter() {
                    out.extend_from_slice(&u.outpoint.txid.0);
                    put_u32(out, u.outpoint.index);
                    put_u64(out, u.amount);
                }
            }
        }
    }

    fn encoded_len(&self) -> usize {
        1 + match self {
            Message::Rb(m) => {
                13 + match &m.kind {
                    RbKind::Init(p) | RbKind::FetchResp(p) => 4 + p.len(),
                    _ => 32,
                }
            }
            Message::Bin(_) => 8 + 4 + 4 + 1 + 1,
            Message::Attest(a) => {
                12 + a.proposers.encoded_len() + a.covered.encoded_len() + a.verdicts.len().div_ceil(2) + 64
            }
            Message::Cons1(m) => {
                9 + match &m.kind {
                    Cons1Kind::PrePrepare(p) => 4 + p.len(),
                    _ => 32,
                }
            }
            Message::Submit { tx, .. } => 1 + tx.encoded_len(),
            Message::ReadReq { .. } => 8 + 32,
            Message::ReadResp { utxos, .. } => 8 + 32 + 8 + 4 + utxos.len() * UTXO_LEN,
        }
    }
}

impl Decode for Message {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            TAG_RB => {
                let key = RbKey { instance: r.u64()?, broadcaster: NodeId(r.u32()?) };
                let kind = match r.u8()? {
                    0 => RbKind::Init(Payload::new(r.bytes()?.to_vec())),
                    1 => RbKind::Echo(Digest::read(r)?),
                    2 => RbKind::Ready(Digest::read(r)?),
                    3 => RbKind::FetchReq(Digest::read(r)?),
                    4 => RbKind::FetchResp(Payload::new(r.bytes()?.to_vec())),
                    tag => return Err(DecodeError::InvalidTag { what: "rb kind", tag }),
                };
                Ok(Message::Rb(RbMessage { key, kind }))
            }
            TAG_BIN => {
                let instance = r.u64()?;
                let proposer = NodeId(r.u32()?);
                let round = r.u32()?;
                let kind = match r.u8()? {
                    0 => BinKind::Est,
                    1 => BinKind::Aux,
                    2 => BinKind::Coord,
                    tag => return Err(DecodeError::InvalidTag { what: "bin kind", tag }),
                };
                let value = r.bool()?;
                Ok(Message::Bin(BinMessage { instance, proposer, round, kind, value }))
            }
            TAG_ATTEST => {
                let instance = r.u64()?;
                let verifier = NodeId(r.u32()?);
                let proposers = Bitmap::decode_from(r)?;
                let covered = Bitmap::decode_from(r)?;
                let count = covered.count_ones();
                let verdicts = unpack_verdicts(r.take(count.div_ceil(2))?, count)?;
                let signature = Signature(r.array()?);
                Ok(Message::Attest(Arc::new(AttestationBatch {
                    instance,
                    verifier,
                    proposers,
                    covered,
                    verdicts,
                    signature,
                })))
            }
            TAG_CONS1 => {
                let instance = r.u64()?;
                let kind = match r.u8()? {
                    0 => Cons1Kind::PrePrepare(Payload::new(r.bytes()?.to_vec())),
                    1 => Cons1Kind::Prepare(Digest::read(r)?),
                    2 => Cons1Kind::Commit(Digest::read(r)?),
                    tag => return Err(DecodeError::InvalidTag { what: "cons1 kind", tag }),
                };
                Ok(Message::Cons1(Cons1Message { instance, kind }))
            }
            TAG_SUBMIT => {
                let rank = r.u8()?;
                Ok(Message::Submit { tx: Arc::new(Transaction::decode_from(r)?), rank })
            }
            TAG_READ_REQ => Ok(Message::ReadReq { poll: r.u64()?, account: Account(Digest::read(r)?) }),
            TAG_READ_RESP => {
                let poll = r.u64()?;
                let account = Account(Digest::read(r)?);
                let height = r.u64()?;
                let count = r.len_prefix(UTXO_LEN)?;
                let mut utxos = Vec::with_capacity(count);
                for _ in 0..count {
                    let txid = Digest::read(r)?;
                    let index = r.u32()?;
                    utxos.push(Utxo { outpoint: OutPoint { txid, index }, amount: r.u64()? });
                }
                Ok(Message::ReadResp { poll, account, height, utxos: Arc::new(utxos) })
            }
            tag => Err(DecodeError::InvalidTag { what: "message", tag }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::derive_keypair;
    use crate::types::TxOutput;
    use proptest::prelude::*;

    fn tx(seed: u64, n_in: usize, n_out: usize) -> Transaction {
        let kp = derive_keypair(b"msg-test", seed % 4);
        let ops: Vec<OutPoint> = (0..n_in)
            .map(|i| OutPoint { txid: hash(&(seed + i as u64).to_le_bytes()), index: i as u32 })
            .collect();
        let spends: Vec<(OutPoint, &KeyPair)> = ops.iter().map(|op| (*op, &kp)).collect();
        let outputs = (0..n_out)
            .map(|i| TxOutput { amount: 1 + i as u64 * 7 + seed, recipient: kp.account() })
            .collect();
        Transaction::signed(&spends, outputs, seed)
    }

    fn roundtrip(m: &Message) {
        let bytes = m.encode();
        assert_eq!(bytes.len(), m.encoded_len(), "{m:?}");
        assert_eq!(&Message::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn every_variant_roundtrips() {
        let key = RbKey { instance: 9, broadcaster: NodeId(3) };
        let payload = Payload::from_proposal(Proposal { proposer: NodeId(3), instance: 9, txs: vec![tx(1, 1, 2)] });
        let d = payload.digest();
        let kp = derive_keypair(b"node", 2);
        let verdicts = vec![ValidationVerdict::Valid, ValidationVerdict::OverSpend, ValidationVerdict::Malformed];
        let batch = AttestationBatch::signed(
            9,
            NodeId(2),
            Bitmap::from_bools(&[true, false, true, true]),
            Bitmap::from_bools(&[true, true, false, false, true]),
            verdicts,
            &kp,
        );
        assert!(batch.verify(kp.public()));
        let msgs = vec![
            Message::Rb(RbMessage { key, kind: RbKind::Init(payload.clone()) }),
            Message::Rb(RbMessage { key, kind: RbKind::Echo(d) }),
            Message::Rb(RbMessage { key, kind: RbKind::Ready(d) }),
            Message::Rb(RbMessage { key, kind: RbKind::FetchReq(d) }),
            Message::Rb(RbMessage { key, kind: RbKind::FetchResp(payload.clone()) }),
            Message::Bin(BinMessage { instance: 9, proposer: NodeId(1), round: 4, kind: BinKind::Coord, value: true }),
            Message::Attest(Arc::new(batch)),
            Message::Cons1(Cons1Message { instance: 2, kind: Cons1Kind::PrePrepare(payload) }),
            Message::Cons1(Cons1Message { instance: 2, kind: Cons1Kind::Commit(d) }),
            Message::Submit { tx: Arc::new(tx(5, 2, 1)), rank: 1 },
            Message::ReadReq { poll: 77, account: kp.account() },
            Message::ReadResp {
                poll: 77,
                account: kp.account(),
                height: 3,
                utxos: Arc::new(vec![Utxo { outpoint: OutPoint { txid: d, index: 1 }, amount: 10 }]),
            },
        ];
        for m in &msgs {
            roundtrip(m);
        }
    }

    #[test]
    fn echo_and_ready_carry_a_32_byte_digest() {
        let key = RbKey { instance: 1, broadcaster: NodeId(0) };
        let echo = Message::Rb(RbMessage { key, kind: RbKind::Echo(Digest::ZERO) });
        // tag + instance + broadcaster + kind + digest
        assert_eq!(echo.encoded_len(), 1 + 8 + 4 + 1 + 32);
    }

    #[test]
    fn corrupted_payload_does_not_decode() {
        let p = Payload::from_proposal(Proposal { proposer: NodeId(0), instance: 1, txs: vec![tx(3, 1, 1)] });
        let mut bytes = p.bytes().to_vec();
        bytes.push(7);
        let bad = Payload::new(bytes);
        assert!(bad.proposal().is_none());
        assert_ne!(bad.digest(), p.digest());
        assert!(Payload::new(p.bytes().to_vec()).proposal().is_some());
    }

    #[test]
    fn tampered_attestation_fails_verification() {
        let kp = derive_keypair(b"node", 0);
        let mut b = AttestationBatch::signed(
            1,
            NodeId(0),
            Bitmap::from_bools(&[true]),
            Bitmap::from_bools(&[true]),
            vec![ValidationVerdict::BadSignature],
            &kp,
        );
        b.verdicts[0] = ValidationVerdict::Valid;
        assert!(!b.verify(kp.public()));
    }

    #[test]
    fn verdict_padding_is_canonical() {
        let kp = derive_keypair(b"node", 0);
        let b = AttestationBatch::signed(
            1,
            NodeId(0),
            Bitmap::from_bools(&[true]),
            Bitmap::from_bools(&[true]),
            vec![ValidationVerdict::OverSpend],
            &kp,
        );
        let mut bytes = Message::Attest(Arc::new(b)).encode();
        let pos = bytes.len() - 65;
        bytes[pos] |= 0x30;
        assert!(Message::decode(&bytes).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn transactions_roundtrip(seed in 0u64..1_000_000, n_in in 1usize..4, n_out in 1usize..4, nonce in any::<u64>()) {
            let base = tx(seed, n_in, n_out);
            let t = Transaction::new(base.inputs.clone(), base.outputs.clone(), nonce);
            let bytes = t.encode();
            prop_assert_eq!(bytes.len(), t.encoded_len());
            let back = Transaction::decode(&bytes).unwrap();
            prop_assert_eq!(back.txid(), t.txid());
            prop_assert_eq!(back, t);
        }
    }

    proptest! {
        #[test]
        fn bin_messages_roundtrip(instance in any::<u64>(), p in any::<u32>(), round in any::<u32>(), k in 0u8..3, v in any::<bool>()) {
            let kind = [BinKind::Est, BinKind::Aux, BinKind::Coord][k as usize];
            roundtrip(&Message::Bin(BinMessage { instance, proposer: NodeId(p), round, kind, value: v }));
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            if let Ok(m) = Message::decode(&bytes) {
                prop_assert_eq!(m.encode(), bytes);
            }
        }
    }
}
