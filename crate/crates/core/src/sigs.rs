//! One-time hash-based signatures (Lamport over SHA-256).
//!
//! The private key is a 32-byte seed from which 2×256 preimages are
//! derived. The public key is the SHA-256 of the full table of preimage
//! hashes, so ledger entries stay 32 bytes. A signature reveals one
//! preimage per digest bit together with the hash of the other one, which
//! is enough for the verifier to rebuild the table.

use std::fmt;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEME_ID: &str = "lamport-sha256";

const DIGEST_BITS: usize = 256;
const HASH_LEN: usize = 32;
/// Revealed preimage plus the hash of the unrevealed one, per digest bit.
pub const SIGNATURE_LEN: usize = DIGEST_BITS * 2 * HASH_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SigError {
    #[error("security parameter must be at least 4, got {0}")]
    SecurityParameter(usize),
    #[error("one-time key already signed a different message")]
    KeyReuse,
    #[error("malformed hex: {0}")]
    Hex(String),
}

fn sha256(parts: &[&[u8]]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Secret half of a key pair. Not serializable and not printable.
pub struct SigningKey {
    seed: [u8; HASH_LEN],
    signed: Mutex<Option<[u8; HASH_LEN]>>,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(<redacted>)")
    }
}

impl SigningKey {
    fn preimage(&self, index: usize, bit: u8) -> [u8; HASH_LEN] {
        sha256(&[
            b"lamport-leaf",
            &self.seed,
            &(index as u16).to_be_bytes(),
            &[bit],
        ])
    }

    fn public_key(&self) -> PublicKey {
        let mut table = Sha256::new();
        for i in 0..DIGEST_BITS {
            for bit in 0..2 {
                table.update(sha256(&[&self.preimage(i, bit)]));
            }
        }
        PublicKey(table.finalize().into())
    }

    /// Signs the SHA-256 of `message`. Signing the same message again
    /// returns the same signature; any other message is refused.
    pub fn sign(&self, message: &[u8]) -> Result<Signature, SigError> {
        let digest = sha256(&[message]);
        {
            let mut guard = self.signed.lock().expect("signing guard poisoned");
            match *guard {
                Some(prev) if prev != digest => return Err(SigError::KeyReuse),
                Some(_) => {}
                None => *guard = Some(digest),
            }
        }
        let mut bytes = Vec::with_capacity(SIGNATURE_LEN);
        for i in 0..DIGEST_BITS {
            let bit = digest_bit(&digest, i);
            bytes.extend_from_slice(&self.preimage(i, bit));
            bytes.extend_from_slice(&sha256(&[&self.preimage(i, 1 - bit)]));
        }
        Ok(Signature {
            bytes,
            scheme_id: SCHEME_ID.to_string(),
        })
    }
}

fn digest_bit(digest: &[u8; HASH_LEN], i: usize) -> u8 {
    (digest[i / 8] >> (7 - i % 8)) & 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; HASH_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(PublicKey)
    }

    pub fn from_hex(s: &str) -> Result<Self, SigError> {
        let raw = hex::decode(s).map_err(|e| SigError::Hex(e.to_string()))?;
        Self::from_bytes(&raw).ok_or_else(|| SigError::Hex(format!("expected {HASH_LEN} bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    pub scheme_id: String,
}

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, SigError> {
        Ok(Self {
            bytes: hex::decode(s).map_err(|e| SigError::Hex(e.to_string()))?,
            scheme_id: SCHEME_ID.to_string(),
        })
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug)]
pub struct KeyPair {
    pub private_key: SigningKey,
    pub public_key: PublicKey,
    pub scheme_id: &'static str,
}

/// Draws a fresh one-time key pair.
pub fn keygen<R: Rng + ?Sized>(security_param: usize, rng: &mut R) -> Result<KeyPair, SigError> {
    if security_param < 4 {
        return Err(SigError::SecurityParameter(security_param));
    }
    let private_key = SigningKey {
        seed: rng.random(),
        signed: Mutex::new(None),
    };
    let public_key = private_key.public_key();
    Ok(KeyPair {
        private_key,
        public_key,
        scheme_id: SCHEME_ID,
    })
}

pub fn sign(private_key: &SigningKey, message: &[u8]) -> Result<Signature, SigError> {
    private_key.sign(message)
}

/// Malformed or foreign-scheme signatures are rejections, never errors.
pub fn verify_sig(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    if signature.scheme_id != SCHEME_ID || signature.bytes.len() != SIGNATURE_LEN {
        return false;
    }
    let digest = sha256(&[message]);
    let mut table = Sha256::new();
    for (i, chunk) in signature.bytes.chunks_exact(2 * HASH_LEN).enumerate() {
        let revealed = sha256(&[&chunk[..HASH_LEN]]);
        let other = &chunk[HASH_LEN..];
        if digest_bit(&digest, i) == 0 {
            table.update(revealed);
            table.update(other);
        } else {
            table.update(other);
            table.update(revealed);
        }
    }
    let rebuilt: [u8; HASH_LEN] = table.finalize().into();
    rebuilt == public_key.0
}
