// SPDX-License-Identifier: Apache-2.0

//! Hashing, deterministic key generation, signatures and hybrid envelopes.
//!
//! Every key in the system is derived from a caller-supplied 32-byte seed so
//! that a whole simulation is reproducible from its top-level seed. A
//! [`KeyPair`] carries two sub-keys derived from the same seed: an X25519
//! agreement key used as an envelope recipient and an Ed25519 key used for
//! signing. The public half of both is encoded together as one 64-byte
//! [`PublicKey`], and the key id is the SHA-256 digest of that encoding.

mod envelope;

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::{Decoder, Encoder, WireError};

pub use envelope::{
    open, open_layers, seal, seal_layered, HybridSuite, SealedEnvelope, X25519ChaChaPoly, ENVELOPE_NONCE_LEN,
    ENVELOPE_TAG_LEN,
};

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

/// Content digest of an encoded public key.
pub type KeyId = Digest;
/// Stable identity of an enclave instance across key rotations.
pub type NodeId = Digest;
pub type JobId = Digest;

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }

    /// First eight hex characters, for logs and tables.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
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

/// SHA-256 of a single byte string.
pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// SHA-256 over length-prefixed parts, so part boundaries are unambiguous.
/// Used for domain-separated derivations.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("envelope addressed to {expected:?}, key is {actual:?}")]
    WrongRecipient { expected: KeyId, actual: KeyId },
    #[error("authentication tag check failed")]
    TamperDetected,
    #[error("signature does not verify")]
    BadSignature,
    #[error("signature was produced by {claimed:?}, not {actual:?}")]
    SignerMismatch { claimed: KeyId, actual: KeyId },
    #[error("signed payload does not match")]
    PayloadMismatch,
    #[error("malformed encoding: {0}")]
    Malformed(#[from] WireError),
}

/// Encoded public half of a [`KeyPair`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey {
    agreement: [u8; 32],
    verifying: [u8; 32],
}

impl PublicKey {
    pub const ENCODED_LEN: usize = 64;

    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.agreement);
        out[32..].copy_from_slice(&self.verifying);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(WireError::invalid("public key", format!("{} bytes", bytes.len())).into());
        }
        let mut agreement = [0u8; 32];
        let mut verifying = [0u8; 32];
        agreement.copy_from_slice(&bytes[..32]);
        verifying.copy_from_slice(&bytes[32..]);
        VerifyingKey::from_bytes(&verifying)
            .map_err(|_| WireError::invalid("public key", "not a valid ed25519 point"))?;
        Ok(PublicKey { agreement, verifying })
    }

    pub fn key_id(&self) -> KeyId {
        digest(&self.to_bytes())
    }

    pub(crate) fn agreement(&self) -> x25519_dalek::PublicKey {
        x25519_dalek::PublicKey::from(self.agreement)
    }

    fn verifying(&self) -> VerifyingKey {
        VerifyingKey::from_bytes(&self.verifying).expect("validated at construction")
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.to_bytes());
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, CryptoError> {
        PublicKey::from_bytes(dec.bytes()?)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.key_id().short())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = hex::decode(s).map_err(serde::de::Error::custom)?;
        PublicKey::from_bytes(&raw).map_err(serde::de::Error::custom)
    }
}

/// An agreement + signing key pair derived from one seed.
#[derive(Clone)]
pub struct KeyPair {
    key_id: KeyId,
    public_key: PublicKey,
    seed: [u8; 32],
    agreement: x25519_dalek::StaticSecret,
    signing: SigningKey,
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.public_key == other.public_key
    }
}

impl Eq for KeyPair {}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    /// The seed the pair was derived from. Holding it is equivalent to
    /// holding the private key.
    pub fn private_seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub(crate) fn agreement_secret(&self) -> &x25519_dalek::StaticSecret {
        &self.agreement
    }
}

/// Derives a key pair from `seed`. Equal seeds give equal pairs.
pub fn generate_keypair(seed: &[u8; 32]) -> KeyPair {
    let agreement_bytes = digest_parts(&[b"confidant/keygen/x25519", seed]);
    let signing_bytes = digest_parts(&[b"confidant/keygen/ed25519", seed]);
    let agreement = x25519_dalek::StaticSecret::from(agreement_bytes.0);
    let signing = SigningKey::from_bytes(&signing_bytes.0);
    let public_key = PublicKey {
        agreement: x25519_dalek::PublicKey::from(&agreement).to_bytes(),
        verifying: signing.verifying_key().to_bytes(),
    };
    KeyPair {
        key_id: public_key.key_id(),
        public_key,
        seed: *seed,
        agreement,
        signing,
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Signature {
    pub signer_key_id: KeyId,
    pub payload_digest: Digest,
    pub sig_bytes: Vec<u8>,
}

const SIGNATURE_DOMAIN: &[u8] = b"confidant/signature/v1";

fn signing_message(payload_digest: &Digest) -> Vec<u8> {
    let mut msg = SIGNATURE_DOMAIN.to_vec();
    msg.extend_from_slice(payload_digest.as_bytes());
    msg
}

pub fn sign(key: &KeyPair, payload: &[u8]) -> Signature {
    let payload_digest = digest(payload);
    let sig = key.signing.sign(&signing_message(&payload_digest));
    Signature {
        signer_key_id: key.key_id,
        payload_digest,
        sig_bytes: sig.to_bytes().to_vec(),
    }
}

/// Checks `sig` against the exact `payload` and the signer's public key.
pub fn verify(sig: &Signature, signer: &PublicKey, payload: &[u8]) -> Result<(), CryptoError> {
    let actual = signer.key_id();
    if sig.signer_key_id != actual {
        return Err(CryptoError::SignerMismatch {
            claimed: sig.signer_key_id,
            actual,
        });
    }
    if digest(payload) != sig.payload_digest {
        return Err(CryptoError::PayloadMismatch);
    }
    let raw: [u8; 64] = sig
        .sig_bytes
        .as_slice()
        .try_into()
        .map_err(|_| CryptoError::BadSignature)?;
    let sig_value = ed25519_dalek::Signature::from_bytes(&raw);
    signer
        .verifying()
        .verify(&signing_message(&sig.payload_digest), &sig_value)
        .map_err(|_| CryptoError::BadSignature)
}

impl Signature {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.signer_key_id.as_bytes())
            .bytes(self.payload_digest.as_bytes())
            .bytes(&self.sig_bytes);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Signature {
            signer_key_id: decode_digest(dec)?,
            payload_digest: decode_digest(dec)?,
            sig_bytes: dec.bytes()?.to_vec(),
        })
    }
}

/// Reads a length-prefixed 32-byte digest.
pub fn decode_digest(dec: &mut Decoder<'_>) -> Result<Digest, WireError> {
    let raw = dec.bytes()?;
    let arr: [u8; 32] = raw
        .try_into()
        .map_err(|_| WireError::invalid("digest", format!("{} bytes", raw.len())))?;
    Ok(Digest(arr))
}
