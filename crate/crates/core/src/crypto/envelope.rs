// SPDX-License-Identifier: Apache-2.0

//! Hybrid public-key envelopes: ephemeral X25519 agreement, HKDF-SHA256 key
//! derivation and ChaCha20-Poly1305 authenticated encryption.
//!
//! Layered envelopes nest one envelope inside another. The first recipient
//! in the list owns the outermost layer, so a holder of only one of the keys
//! either cannot open anything or sees another envelope.

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use super::{decode_digest, digest_parts, CryptoError, KeyId, KeyPair, PublicKey};
use crate::wire::{Decoder, Encoder, WireError};

pub const ENVELOPE_NONCE_LEN: usize = 12;
pub const ENVELOPE_TAG_LEN: usize = 16;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SealedEnvelope {
    pub recipient_key_id: KeyId,
    pub ephemeral_public_key: Vec<u8>,
    pub nonce: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub auth_tag: Vec<u8>,
}

impl SealedEnvelope {
    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.recipient_key_id.as_bytes())
            .bytes(&self.ephemeral_public_key)
            .bytes(&self.nonce)
            .bytes(&self.ciphertext)
            .bytes(&self.auth_tag);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        let recipient_key_id = decode_digest(dec)?;
        let ephemeral_public_key = dec.bytes()?.to_vec();
        let nonce = dec.bytes()?.to_vec();
        if !(12..=24).contains(&nonce.len()) {
            return Err(WireError::invalid("nonce", format!("{} bytes", nonce.len())));
        }
        let ciphertext = dec.bytes()?.to_vec();
        let auth_tag = dec.bytes()?.to_vec();
        Ok(SealedEnvelope {
            recipient_key_id,
            ephemeral_public_key,
            nonce,
            ciphertext,
            auth_tag,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut dec = Decoder::new(bytes);
        let env = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(env)
    }

    /// Encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        4 * 5 + 32 + self.ephemeral_public_key.len() + self.nonce.len() + self.ciphertext.len() + self.auth_tag.len()
    }
}

/// A public-key encryption scheme usable as an envelope suite.
pub trait HybridSuite {
    fn seal(&self, plaintext: &[u8], recipient: &PublicKey, rng_seed: &[u8; 32]) -> SealedEnvelope;
    fn open(&self, envelope: &SealedEnvelope, key: &KeyPair) -> Result<Vec<u8>, CryptoError>;
}

/// The default suite.
#[derive(Debug, Default, Clone, Copy)]
pub struct X25519ChaChaPoly;

const KDF_INFO: &[u8] = b"confidant/envelope/x25519-hkdf-chacha20poly1305";

fn derive_key(shared: &[u8; 32], recipient: &KeyId, ephemeral: &[u8]) -> Key {
    let hk = Hkdf::<Sha256>::new(Some(recipient.as_bytes()), shared);
    let mut info = KDF_INFO.to_vec();
    info.extend_from_slice(ephemeral);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF length");
    Key::from(okm)
}

fn associated_data(recipient: &KeyId, ephemeral: &[u8], nonce: &[u8]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(32 + ephemeral.len() + nonce.len());
    aad.extend_from_slice(recipient.as_bytes());
    aad.extend_from_slice(ephemeral);
    aad.extend_from_slice(nonce);
    aad
}

impl HybridSuite for X25519ChaChaPoly {
    fn seal(&self, plaintext: &[u8], recipient: &PublicKey, rng_seed: &[u8; 32]) -> SealedEnvelope {
        let mut rng = ChaCha20Rng::from_seed(digest_parts(&[b"confidant/envelope/rng", rng_seed]).0);
        let mut eph_bytes = [0u8; 32];
        rng.fill_bytes(&mut eph_bytes);
        let mut nonce = [0u8; ENVELOPE_NONCE_LEN];
        rng.fill_bytes(&mut nonce);

        let ephemeral = x25519_dalek::StaticSecret::from(eph_bytes);
        let ephemeral_pub = x25519_dalek::PublicKey::from(&ephemeral).to_bytes();
        let shared = ephemeral.diffie_hellman(&recipient.agreement());
        let recipient_key_id = recipient.key_id();
        let key = derive_key(shared.as_bytes(), &recipient_key_id, &ephemeral_pub);

        let mut buf = plaintext.to_vec();
        let aad = associated_data(&recipient_key_id, &ephemeral_pub, &nonce);
        let tag = ChaCha20Poly1305::new(&key)
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), &aad, &mut buf)
            .expect("plaintext within ChaCha20 limits");
        SealedEnvelope {
            recipient_key_id,
            ephemeral_public_key: ephemeral_pub.to_vec(),
            nonce: nonce.to_vec(),
            ciphertext: buf,
            auth_tag: tag.to_vec(),
        }
    }

    fn open(&self, envelope: &SealedEnvelope, key: &KeyPair) -> Result<Vec<u8>, CryptoError> {
        if envelope.recipient_key_id != key.key_id() {
            return Err(CryptoError::WrongRecipient {
                expected: envelope.recipient_key_id,
                actual: key.key_id(),
            });
        }
        let eph: [u8; 32] = envelope
            .ephemeral_public_key
            .as_slice()
            .try_into()
            .map_err(|_| CryptoError::TamperDetected)?;
        if envelope.nonce.len() != ENVELOPE_NONCE_LEN || envelope.auth_tag.len() != ENVELOPE_TAG_LEN {
            return Err(CryptoError::TamperDetected);
        }
        let shared = key
            .agreement_secret()
            .diffie_hellman(&x25519_dalek::PublicKey::from(eph));
        if !shared.was_contributory() {
            return Err(CryptoError::TamperDetected);
        }
        let sym = derive_key(shared.as_bytes(), &envelope.recipient_key_id, &eph);
        let aad = associated_data(&envelope.recipient_key_id, &eph, &envelope.nonce);
        let mut buf = envelope.ciphertext.clone();
        ChaCha20Poly1305::new(&sym)
            .decrypt_in_place_detached(
                Nonce::from_slice(&envelope.nonce),
                &aad,
                &mut buf,
                Tag::from_slice(&envelope.auth_tag),
            )
            .map_err(|_| CryptoError::TamperDetected)?;
        Ok(buf)
    }
}

pub fn seal(plaintext: &[u8], recipient: &PublicKey, rng_seed: &[u8; 32]) -> SealedEnvelope {
    X25519ChaChaPoly.seal(plaintext, recipient, rng_seed)
}

pub fn open(envelope: &SealedEnvelope, key: &KeyPair) -> Result<Vec<u8>, CryptoError> {
    X25519ChaChaPoly.open(envelope, key)
}

fn layer_seed(rng_seed: &[u8; 32], layer: usize) -> [u8; 32] {
    if layer == 0 {
        *rng_seed
    } else {
        digest_parts(&[b"confidant/envelope/layer", rng_seed, &(layer as u64).to_le_bytes()]).0
    }
}

/// Seals `plaintext` in one layer per recipient; `recipients[0]` is the
/// outermost layer. A single recipient is byte-identical to [`seal`].
///
/// # Panics
///
/// Panics if `recipients` is empty.
pub fn seal_layered(plaintext: &[u8], recipients: &[PublicKey], rng_seed: &[u8; 32]) -> SealedEnvelope {
    assert!(!recipients.is_empty(), "seal_layered needs at least one recipient");
    let last = recipients.len() - 1;
    let mut env = seal(plaintext, &recipients[last], &layer_seed(rng_seed, last));
    for layer in (0..last).rev() {
        env = seal(&env.to_bytes(), &recipients[layer], &layer_seed(rng_seed, layer));
    }
    env
}

/// Opens a layered envelope with `keys` in layer order.
pub fn open_layers(envelope: &SealedEnvelope, keys: &[KeyPair]) -> Result<Vec<u8>, CryptoError> {
    let mut current = envelope.clone();
    for (i, key) in keys.iter().enumerate() {
        let inner = open(&current, key)?;
        if i + 1 == keys.len() {
            return Ok(inner);
        }
        current = SealedEnvelope::from_bytes(&inner)?;
    }
    Err(WireError::invalid("layers", "no keys supplied").into())
}
