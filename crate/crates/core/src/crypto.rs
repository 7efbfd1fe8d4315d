//! SHA256 digests and ECDSA over secp256k1.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use secp256k1::{ecdsa, All, Message, Secp256k1, SecretKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader};

fn secp() -> &'static Secp256k1<All> {
    static CTX: OnceLock<Secp256k1<All>> = OnceLock::new();
    CTX.get_or_init(Secp256k1::new)
}

/// A 32-byte SHA256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(Digest(out))
    }

    /// First 8 bytes as a little-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().expect("8 bytes"))
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(r.array()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hash of several byte strings fed in sequence.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Compressed SEC1 public key bytes. Not validated on construction; an
/// unparseable key simply never verifies.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 33]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.0)[..12])
    }
}

/// Compact (r, s) ECDSA signature bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..12])
    }
}

/// Pay-to-public-key-hash address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Account(pub Digest);

impl Account {
    pub fn of(pk: &PublicKey) -> Account {
        Account(hash(&pk.0))
    }
}

impl fmt::Debug for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Account({:?})", self.0)
    }
}

impl fmt::Display for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("seed is zero or not below the curve order")]
    InvalidSeed,
}

#[derive(Clone)]
pub struct KeyPair {
    secret: SecretKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn account(&self) -> Account {
        Account::of(&self.public)
    }

    /// Signs the SHA256 digest of `msg`.
    pub fn sign(&self, msg: &[u8]) -> Signature {
        self.sign_digest(&hash(msg))
    }

    pub fn sign_digest(&self, digest: &Digest) -> Signature {
        let m = Message::from_digest(digest.0);
        Signature(secp().sign_ecdsa(&m, &self.secret).serialize_compact())
    }
}

/// Deterministic key pair from a 32-byte seed used directly as the scalar.
pub fn keygen(seed: &[u8; 32]) -> Result<KeyPair, KeyError> {
    let secret = SecretKey::from_byte_array(seed).map_err(|_| KeyError::InvalidSeed)?;
    let public = PublicKey(secret.public_key(secp()).serialize());
    Ok(KeyPair { secret, public })
}

/// Key pair derived from a domain label and an index; never fails in
/// practice because the seed is a hash output (zero or ≥ n has probability
/// ~2^-128, handled by rehashing).
pub fn derive_keypair(domain: &[u8], index: u64) -> KeyPair {
    let mut seed = hash_parts(&[domain, &index.to_le_bytes()]);
    loop {
        if let Ok(kp) = keygen(&seed.0) {
            return kp;
        }
        seed = hash(&seed.0);
    }
}

pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    verify_digest(pk, &hash(msg), sig)
}

pub fn verify_digest(pk: &PublicKey, digest: &Digest, sig: &Signature) -> bool {
    let Ok(key) = secp256k1::PublicKey::from_slice(&pk.0) else {
        return false;
    };
    let Ok(sig) = ecdsa::Signature::from_compact(&sig.0) else {
        return false;
    };
    secp()
        .verify_ecdsa(&Message::from_digest(digest.0), &sig, &key)
        .is_ok()
}

/// Memo of signature checks shared by the simulated nodes of one run.
///
/// Verification is a pure function of (key, digest, signature), so the
/// simulator runs the real ECDSA check once per distinct triple; the virtual
/// CPU cost is still charged to every node that verifies.
#[derive(Clone, Default)]
pub struct SigCache {
    inner: Arc<Mutex<SigCacheInner>>,
}

#[derive(Default)]
struct SigCacheInner {
    results: HashMap<Digest, bool>,
    ecdsa_calls: u64,
}

impl SigCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn verify_digest(&self, pk: &PublicKey, digest: &Digest, sig: &Signature) -> bool {
        let key = hash_parts(&[&pk.0, &digest.0, &sig.0]);
        if let Some(&ok) = self.inner.lock().expect("sig cache poisoned").results.get(&key) {
            return ok;
        }
        let ok = verify_digest(pk, digest, sig);
        let mut inner = self.inner.lock().expect("sig cache poisoned");
        inner.ecdsa_calls += 1;
        inner.results.insert(key, ok);
        ok
    }

    /// Number of real ECDSA verifications performed.
    pub fn ecdsa_calls(&self) -> u64 {
        self.inner.lock().expect("sig cache poisoned").ecdsa_calls
    }
}
