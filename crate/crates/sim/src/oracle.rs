// SPDX-License-Identifier: Apache-2.0

//! A passive adversary that sees everything outside the enclaves: the
//! ledger transcript, every stored object, every network frame and every
//! byte a client sent. It also holds whatever enclave keys leaked.
//!
//! It tries every leaked key on every envelope it can parse, recurses
//! into the layers it opens, rebuilds aTLS session keys from any
//! ClientFinish it can open, and finally searches all raw and recovered
//! bytes for client plaintexts.

use std::collections::BTreeSet;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use confidant_core::atls::Frame;
use confidant_core::crypto::{digest_parts, open, KeyPair, SealedEnvelope};
use confidant_core::ledger::{EventBody, JobPayload, LedgerEvent};
use memchr::memmem;
use serde::Serialize;

/// Everything the adversary can read.
#[derive(Default)]
pub struct Observation {
    pub blobs: Vec<Vec<u8>>,
    pub envelopes: Vec<SealedEnvelope>,
    pub sessions: Vec<Vec<Frame>>,
}

impl Observation {
    pub fn add_events(&mut self, events: &[LedgerEvent]) {
        for e in events {
            self.blobs.push(e.body.clone());
            let payloads = match e.decode_body() {
                Ok(EventBody::JobSubmitted { payload: Some(p), .. }) => vec![p],
                Ok(EventBody::LayerForwarded { payload, .. }) => vec![payload],
                Ok(EventBody::JobCompleted { result, .. }) => vec![result],
                _ => vec![],
            };
            for p in payloads {
                if let JobPayload::Inline(env) = p {
                    self.envelopes.push(env);
                }
            }
        }
        self.blobs.push(confidant_core::ledger::to_jsonl(events).into_bytes());
    }

    /// Stored objects are tried as envelopes whatever points at them.
    pub fn add_storage(&mut self, objects: impl IntoIterator<Item = Vec<u8>>) {
        for bytes in objects {
            if let Ok(env) = SealedEnvelope::from_bytes(&bytes) {
                self.envelopes.push(env);
            }
            self.blobs.push(bytes);
        }
    }

    pub fn add_session(&mut self, frames: &[Frame]) {
        for f in frames {
            self.blobs.push(f.to_bytes());
            if let Frame::ClientFinish { sealed_secret } = f {
                self.envelopes.push(sealed_secret.clone());
            }
        }
        self.sessions.push(frames.to_vec());
    }

    pub fn add_blob(&mut self, bytes: &[u8]) {
        if let Ok(env) = SealedEnvelope::from_bytes(bytes) {
            self.envelopes.push(env);
        }
        self.blobs.push(bytes.to_vec());
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OracleReport {
    pub blobs: usize,
    pub envelopes: usize,
    pub layers_opened: usize,
    /// Opened layers whose plaintext was itself an envelope.
    pub inner_envelopes: usize,
    pub sessions_decrypted: usize,
    /// Indices into the secret list that appear in cleartext anywhere.
    pub recovered: Vec<usize>,
}

impl OracleReport {
    pub fn recovered_nothing(&self) -> bool {
        self.recovered.is_empty()
    }
}

fn session_key(secret: &[u8], hello: &Frame, server_key: &Frame) -> [u8; 32] {
    digest_parts(&[
        b"confidant/atls/session-key",
        secret,
        &hello.to_bytes(),
        &server_key.to_bytes(),
    ])
    .0
}

fn open_app_data(key: &[u8; 32], frame: &Frame) -> Option<Vec<u8>> {
    let Frame::AppData {
        session_id,
        direction,
        seq,
        ciphertext,
    } = frame
    else {
        return None;
    };
    let dir = *direction as u8;
    let mut nonce = [0u8; 12];
    nonce[0] = dir;
    nonce[4..].copy_from_slice(&seq.to_le_bytes());
    let mut aad = session_id.as_bytes().to_vec();
    aad.push(dir);
    ChaCha20Poly1305::new(Key::from_slice(key))
        .decrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: ciphertext,
                aad: &aad,
            },
        )
        .ok()
}

pub fn attack(obs: &Observation, leaked: &[KeyPair], secrets: &[Vec<u8>]) -> OracleReport {
    let mut report = OracleReport {
        blobs: obs.blobs.len(),
        ..OracleReport::default()
    };
    let mut recovered: Vec<Vec<u8>> = Vec::new();
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut queue: Vec<SealedEnvelope> = obs.envelopes.clone();
    while let Some(env) = queue.pop() {
        if !seen.insert(env.to_bytes()) {
            continue;
        }
        report.envelopes += 1;
        for key in leaked {
            if let Ok(plain) = open(&env, key) {
                report.layers_opened += 1;
                if let Ok(inner) = SealedEnvelope::from_bytes(&plain) {
                    report.inner_envelopes += 1;
                    queue.push(inner);
                }
                recovered.push(plain);
            }
        }
    }

    for frames in &obs.sessions {
        let hello = frames.iter().find(|f| matches!(f, Frame::ClientHello { .. }));
        let server_key = frames.iter().find(|f| matches!(f, Frame::ServerKey { .. }));
        let finish = frames.iter().find_map(|f| match f {
            Frame::ClientFinish { sealed_secret } => Some(sealed_secret),
            _ => None,
        });
        let (Some(hello), Some(server_key), Some(finish)) = (hello, server_key, finish) else {
            continue;
        };
        for key in leaked {
            let Ok(secret) = open(finish, key) else { continue };
            if secret.len() < 32 {
                continue;
            }
            let sk = session_key(&secret[..32], hello, server_key);
            let mut any = false;
            for f in frames {
                if let Some(plain) = open_app_data(&sk, f) {
                    recovered.push(plain);
                    any = true;
                }
            }
            if any {
                report.sessions_decrypted += 1;
            }
        }
    }

    report.recovered = secrets
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let finder = memmem::Finder::new(s.as_slice());
            obs.blobs
                .iter()
                .chain(recovered.iter())
                .any(|b| finder.find(b).is_some())
        })
        .map(|(i, _)| i)
        .collect();
    report
}
