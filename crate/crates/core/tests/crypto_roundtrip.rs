// SPDX-License-Identifier: Apache-2.0

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce, Tag};
use confidant_core::crypto::{
    generate_keypair, open, open_layers, seal, seal_layered, CryptoError, KeyPair, SealedEnvelope,
};
use confidant_core::storage::{ContentStore, StorageError};
use hkdf::Hkdf;
use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

/// Opens an envelope from first principles, without the crate's envelope
/// code: rebuild the recipient's X25519 secret from its seed, then
/// X25519 -> HKDF-SHA256 -> ChaCha20-Poly1305.
fn oracle_open(env: &SealedEnvelope, seed: &[u8; 32]) -> Option<Vec<u8>> {
    let label = b"confidant/keygen/x25519";
    let mut h = Sha256::new();
    h.update((label.len() as u32).to_le_bytes());
    h.update(label);
    h.update(32u32.to_le_bytes());
    h.update(seed);
    let secret: [u8; 32] = h.finalize().into();
    let secret = x25519_dalek::StaticSecret::from(secret);
    let eph: [u8; 32] = env.ephemeral_public_key.clone().try_into().ok()?;
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph));

    let hk = Hkdf::<Sha256>::new(Some(env.recipient_key_id.as_bytes()), shared.as_bytes());
    let mut info = b"confidant/envelope/x25519-hkdf-chacha20poly1305".to_vec();
    info.extend_from_slice(&eph);
    let mut key = [0u8; 32];
    hk.expand(&info, &mut key).ok()?;

    let mut aad = env.recipient_key_id.as_bytes().to_vec();
    aad.extend_from_slice(&env.ephemeral_public_key);
    aad.extend_from_slice(&env.nonce);
    let mut buf = env.ciphertext.clone();
    ChaCha20Poly1305::new(&key.into())
        .decrypt_in_place_detached(
            Nonce::from_slice(&env.nonce),
            &aad,
            &mut buf,
            Tag::from_slice(&env.auth_tag),
        )
        .ok()?;
    Some(buf)
}

fn keys(seeds: &[u8]) -> Vec<KeyPair> {
    seeds.iter().map(|s| generate_keypair(&[*s; 32])).collect()
}

#[test]
fn oracle_agrees_on_fixed_vector() {
    let kp = generate_keypair(&[42; 32]);
    let env = seal(b"attack at dawn", kp.public_key(), &[7; 32]);
    assert_eq!(oracle_open(&env, &[42; 32]).unwrap(), b"attack at dawn");
    assert_eq!(env.ciphertext.len(), 14);
    assert_eq!(env.auth_tag.len(), 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn seal_open_round_trip(plain in proptest::collection::vec(any::<u8>(), 0..2048),
                            key_seed in any::<[u8; 32]>(),
                            rng_seed in any::<[u8; 32]>()) {
        let kp = generate_keypair(&key_seed);
        let env = seal(&plain, kp.public_key(), &rng_seed);
        prop_assert_eq!(open(&env, &kp).unwrap(), plain.clone());
        prop_assert_eq!(oracle_open(&env, &key_seed).unwrap(), plain.clone());
        let wire = SealedEnvelope::from_bytes(&env.to_bytes()).unwrap();
        prop_assert_eq!(wire, env);
    }

    #[test]
    fn layered_round_trip(plain in proptest::collection::vec(any::<u8>(), 0..512),
                          layers in 1usize..=3,
                          rng_seed in any::<[u8; 32]>()) {
        let kps = keys(&[1, 2, 3][..layers]);
        let pks: Vec<_> = kps.iter().map(|k| *k.public_key()).collect();
        let env = seal_layered(&plain, &pks, &rng_seed);
        prop_assert_eq!(env.recipient_key_id, kps[0].key_id());
        prop_assert_eq!(open_layers(&env, &kps).unwrap(), plain.clone());
        if layers > 1 {
            let outer_only = open(&env, &kps[0]).unwrap();
            prop_assert!(SealedEnvelope::from_bytes(&outer_only).is_ok());
            let skip: Vec<_> = kps[1..].to_vec();
            let wrong_key = matches!(open_layers(&env, &skip), Err(CryptoError::WrongRecipient { .. }));
            prop_assert!(wrong_key);
        }
    }

    #[test]
    fn every_field_mutation_detected(plain in proptest::collection::vec(any::<u8>(), 1..256),
                                     which in 0usize..4,
                                     pos in any::<prop::sample::Index>(),
                                     bit in 0u8..8) {
        let kp = generate_keypair(&[9; 32]);
        let mut env = seal(&plain, kp.public_key(), &[1; 32]);
        let field = match which {
            0 => &mut env.ciphertext,
            1 => &mut env.auth_tag,
            2 => &mut env.nonce,
            _ => &mut env.ephemeral_public_key,
        };
        let i = pos.index(field.len());
        field[i] ^= 1 << bit;
        let detected = matches!(open(&env, &kp), Err(CryptoError::TamperDetected));
        prop_assert!(detected);
    }

    #[test]
    fn every_wire_bit_flip_rejected(plain in proptest::collection::vec(any::<u8>(), 1..128),
                                    pos in any::<prop::sample::Index>(),
                                    bit in 0u8..8) {
        let kp = generate_keypair(&[9; 32]);
        let mut bytes = seal(&plain, kp.public_key(), &[1; 32]).to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let outcome = SealedEnvelope::from_bytes(&bytes)
            .map_err(CryptoError::from)
            .and_then(|env| open(&env, &kp));
        prop_assert!(outcome.is_err());
    }

    #[test]
    fn storage_round_trip_and_corruption(blob in proptest::collection::vec(any::<u8>(), 1..4096)) {
        let store = ContentStore::in_memory();
        let r = store.put(&blob).unwrap();
        let expected: [u8; 32] = Sha256::digest(&blob).into();
        prop_assert_eq!(r.content_digest.0, expected);
        prop_assert_eq!(r.size, blob.len() as u64);
        prop_assert_eq!(store.get(&r).unwrap(), blob);
        store.corrupt(&r.content_digest);
        let mismatch = matches!(store.get(&r), Err(StorageError::IntegrityMismatch { .. }));
        prop_assert!(mismatch);
    }
}
