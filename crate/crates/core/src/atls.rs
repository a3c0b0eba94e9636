// SPDX-License-Identifier: Apache-2.0

//! Attested session handshake.
//!
//! Four messages: `ClientHello` carries a fresh nonce, `ServerKey` returns
//! the enclave key and a report whose nonce is derived from the client's,
//! `ClientFinish` delivers a secret sealed to the enclave key, and
//! `ServerFinish` proves the enclave opened it. The client checks the report
//! before it sends `ClientFinish`, so no application data can flow to an
//! unverified peer.
//!
//! Verified certificates are cached per key id for a number of heights. A
//! cache hit skips the root-signature and policy checks but still requires
//! a fresh, key-bound report.

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use thiserror::Error;

use crate::crypto::{
    self, decode_digest, digest, digest_parts, generate_keypair, CryptoError, Digest, JobId, KeyId, KeyPair, PublicKey,
    SealedEnvelope,
};
use crate::ledger::{
    confirmation_payload, failure_payload, Confirmation, FailureEvidence, JobRequest, Ledger, LedgerError,
};
use crate::policy::PolicySet;
use crate::tee::{verify_report, AttestationFailure, AttestationReport, PlatformRoots, TeeInstance};
use crate::wire::{Decoder, Encoder, WireError};

pub const DEFAULT_CACHE_TTL: u64 = 50;

/// Nonce the enclave must place in its report for a given client nonce.
pub fn report_nonce(client_nonce: &[u8; 32]) -> [u8; 32] {
    digest_parts(&[b"confidant/atls/report-nonce", client_nonce]).0
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    ToServer,
    ToClient,
}

impl Direction {
    fn code(self) -> u8 {
        match self {
            Direction::ToServer => 0,
            Direction::ToClient => 1,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Frame {
    ClientHello {
        client_nonce: [u8; 32],
        client_key: PublicKey,
    },
    ServerKey {
        public_key: PublicKey,
        epoch: u64,
        report: AttestationReport,
    },
    ClientFinish {
        sealed_secret: SealedEnvelope,
    },
    ServerFinish {
        session_id: Digest,
        confirm: Digest,
    },
    AppData {
        session_id: Digest,
        direction: Direction,
        seq: u64,
        ciphertext: Vec<u8>,
    },
    Alert {
        reason: String,
    },
}

impl Frame {
    pub fn tag(&self) -> &'static str {
        match self {
            Frame::ClientHello { .. } => "ClientHello",
            Frame::ServerKey { .. } => "ServerKey",
            Frame::ClientFinish { .. } => "ClientFinish",
            Frame::ServerFinish { .. } => "ServerFinish",
            Frame::AppData { .. } => "AppData",
            Frame::Alert { .. } => "Alert",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        match self {
            Frame::ClientHello {
                client_nonce,
                client_key,
            } => {
                enc.u8(1).fixed(client_nonce);
                client_key.encode(&mut enc);
            }
            Frame::ServerKey {
                public_key,
                epoch,
                report,
            } => {
                enc.u8(2);
                public_key.encode(&mut enc);
                enc.u64(*epoch);
                report.encode(&mut enc);
            }
            Frame::ClientFinish { sealed_secret } => {
                enc.u8(3);
                sealed_secret.encode(&mut enc);
            }
            Frame::ServerFinish { session_id, confirm } => {
                enc.u8(4).bytes(session_id.as_bytes()).bytes(confirm.as_bytes());
            }
            Frame::AppData {
                session_id,
                direction,
                seq,
                ciphertext,
            } => {
                enc.u8(5)
                    .bytes(session_id.as_bytes())
                    .u8(direction.code())
                    .u64(*seq)
                    .bytes(ciphertext);
            }
            Frame::Alert { reason } => {
                enc.u8(6).str(reason);
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Frame, WireError> {
        let mut dec = Decoder::new(bytes);
        let pk =
            |dec: &mut Decoder<'_>| PublicKey::decode(dec).map_err(|e| WireError::invalid("public key", e.to_string()));
        let frame = match dec.u8()? {
            1 => Frame::ClientHello {
                client_nonce: dec.fixed()?,
                client_key: pk(&mut dec)?,
            },
            2 => Frame::ServerKey {
                public_key: pk(&mut dec)?,
                epoch: dec.u64()?,
                report: AttestationReport::decode(&mut dec)?,
            },
            3 => Frame::ClientFinish {
                sealed_secret: SealedEnvelope::decode(&mut dec)?,
            },
            4 => Frame::ServerFinish {
                session_id: decode_digest(&mut dec)?,
                confirm: decode_digest(&mut dec)?,
            },
            5 => Frame::AppData {
                session_id: decode_digest(&mut dec)?,
                direction: match dec.u8()? {
                    0 => Direction::ToServer,
                    1 => Direction::ToClient,
                    other => return Err(WireError::invalid("direction", other.to_string())),
                },
                seq: dec.u64()?,
                ciphertext: dec.bytes()?.to_vec(),
            },
            6 => Frame::Alert { reason: dec.string()? },
            other => return Err(WireError::invalid("frame tag", other.to_string())),
        };
        dec.finish()?;
        Ok(frame)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum TranscriptEntry {
    Sent(Frame),
    Received(Frame),
    /// The client accepted the server's evidence.
    Verified {
        cache_hit: bool,
    },
}

/// Ordered log of one client's view of a session.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionTranscript {
    pub entries: Vec<TranscriptEntry>,
}

impl SessionTranscript {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.entries.iter().filter_map(|e| match e {
            TranscriptEntry::Sent(f) | TranscriptEntry::Received(f) => Some(f),
            TranscriptEntry::Verified { .. } => None,
        })
    }

    pub fn tags(&self) -> Vec<&'static str> {
        self.entries
            .iter()
            .map(|e| match e {
                TranscriptEntry::Sent(f) | TranscriptEntry::Received(f) => f.tag(),
                TranscriptEntry::Verified { .. } => "Verified",
            })
            .collect()
    }

    pub fn app_data_frames(&self) -> usize {
        self.frames().filter(|f| matches!(f, Frame::AppData { .. })).count()
    }

    /// True if any application data appears before the first verification
    /// mark.
    pub fn data_before_verify(&self) -> bool {
        for e in &self.entries {
            match e {
                TranscriptEntry::Verified { .. } => return false,
                TranscriptEntry::Sent(Frame::AppData { .. }) | TranscriptEntry::Received(Frame::AppData { .. }) => {
                    return true
                }
                _ => {}
            }
        }
        false
    }

    fn sent(&mut self, f: &Frame) {
        self.entries.push(TranscriptEntry::Sent(f.clone()));
    }

    fn received(&mut self, f: &Frame) {
        self.entries.push(TranscriptEntry::Received(f.clone()));
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AtlsError {
    #[error("attestation invalid: {0}")]
    AttestationInvalid(AttestationFailure),
    #[error("server presented key {actual:?}, expected {expected:?}")]
    UnexpectedKey { expected: KeyId, actual: KeyId },
    #[error("stale report: {0}")]
    StaleReport(String),
    #[error("unexpected frame {0}")]
    UnexpectedFrame(&'static str),
    #[error("peer alert: {0}")]
    Alert(String),
    #[error("server failed to prove possession of the enclave key")]
    FinishMismatch,
    #[error("no session {0:?}")]
    NoSession(Digest),
    #[error("application data failed authentication")]
    Decrypt,
    #[error("sequence {got}, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CachedCertificate {
    pub key_id: KeyId,
    pub report_digest: Digest,
    pub verified_at: u64,
    pub ttl: u64,
}

impl CachedCertificate {
    pub fn is_valid_at(&self, height: u64) -> bool {
        height >= self.verified_at && height - self.verified_at < self.ttl
    }
}

/// Per-client certificate cache.
#[derive(Clone, Debug)]
pub struct CertificateCache {
    ttl: u64,
    entries: BTreeMap<KeyId, CachedCertificate>,
}

impl Default for CertificateCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_TTL)
    }
}

impl CertificateCache {
    pub fn new(ttl: u64) -> Self {
        CertificateCache {
            ttl,
            entries: BTreeMap::new(),
        }
    }

    pub fn ttl(&self) -> u64 {
        self.ttl
    }

    pub fn get(&self, key_id: &KeyId) -> Option<&CachedCertificate> {
        self.entries.get(key_id)
    }

    /// An entry usable at `height`. Expired entries are dropped.
    pub fn lookup(&mut self, key_id: &KeyId, height: u64) -> Option<CachedCertificate> {
        match self.entries.get(key_id) {
            Some(c) if c.is_valid_at(height) => Some(*c),
            Some(_) => {
                self.entries.remove(key_id);
                None
            }
            None => None,
        }
    }

    pub fn insert(&mut self, key_id: KeyId, report_digest: Digest, height: u64) {
        self.entries.insert(
            key_id,
            CachedCertificate {
                key_id,
                report_digest,
                verified_at: height,
                ttl: self.ttl,
            },
        );
    }

    pub fn invalidate(&mut self, key_id: &KeyId) {
        self.entries.remove(key_id);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone, PartialEq, Eq)]
pub struct AttestedSession {
    pub session_id: Digest,
    session_key: [u8; 32],
    pub report: AttestationReport,
    pub server_key: PublicKey,
    pub client_key: PublicKey,
    pub client_nonce: [u8; 32],
    pub established_at: u64,
    pub verification_skipped: bool,
    role: Role,
    send_seq: u64,
    recv_seq: u64,
}

impl fmt::Debug for AttestedSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestedSession")
            .field("session_id", &self.session_id)
            .field("server", &self.server_key.key_id())
            .field("established_at", &self.established_at)
            .field("verification_skipped", &self.verification_skipped)
            .finish_non_exhaustive()
    }
}

fn session_secrets(
    secret: &[u8],
    hello: &Frame,
    server_key: &Frame,
    report: &AttestationReport,
    client_nonce: &[u8; 32],
) -> (Digest, [u8; 32]) {
    let key = digest_parts(&[
        b"confidant/atls/session-key",
        secret,
        &hello.to_bytes(),
        &server_key.to_bytes(),
    ]);
    let id = digest_parts(&[b"confidant/atls/session-id", client_nonce, report.digest().as_bytes()]);
    (id, key.0)
}

fn finish_confirm(session_key: &[u8; 32]) -> Digest {
    digest_parts(&[b"confidant/atls/server-finish", session_key])
}

impl AttestedSession {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn report_digest(&self) -> Digest {
        self.report.digest()
    }

    fn aead_parts(&self, direction: Direction, seq: u64) -> ([u8; 12], Vec<u8>) {
        let mut nonce = [0u8; 12];
        nonce[0] = direction.code();
        nonce[4..].copy_from_slice(&seq.to_le_bytes());
        let mut aad = self.session_id.as_bytes().to_vec();
        aad.push(direction.code());
        (nonce, aad)
    }

    /// Encrypts application data for the peer.
    pub fn seal(&mut self, plaintext: &[u8]) -> Frame {
        let direction = match self.role {
            Role::Client => Direction::ToServer,
            Role::Server => Direction::ToClient,
        };
        let seq = self.send_seq;
        self.send_seq += 1;
        let (nonce, aad) = self.aead_parts(direction, seq);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.session_key));
        let ciphertext = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &aad,
                },
            )
            .expect("in-memory encryption does not fail");
        Frame::AppData {
            session_id: self.session_id,
            direction,
            seq,
            ciphertext,
        }
    }

    /// Decrypts the next application-data frame from the peer.
    pub fn open(&mut self, frame: &Frame) -> Result<Vec<u8>, AtlsError> {
        let Frame::AppData {
            session_id,
            direction,
            seq,
            ciphertext,
        } = frame
        else {
            return Err(AtlsError::UnexpectedFrame(frame.tag()));
        };
        let expected_dir = match self.role {
            Role::Client => Direction::ToClient,
            Role::Server => Direction::ToServer,
        };
        if *session_id != self.session_id || *direction != expected_dir {
            return Err(AtlsError::Decrypt);
        }
        if *seq != self.recv_seq {
            return Err(AtlsError::OutOfOrder {
                expected: self.recv_seq,
                got: *seq,
            });
        }
        let (nonce, aad) = self.aead_parts(*direction, *seq);
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.session_key));
        let plain = cipher
            .decrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: ciphertext,
                    aad: &aad,
                },
            )
            .map_err(|_| AtlsError::Decrypt)?;
        self.recv_seq += 1;
        Ok(plain)
    }
}

/// The enclave side of the handshake.
pub trait HandshakeServer {
    fn respond(&mut self, frame: &Frame) -> Frame;
}

struct PendingHandshake {
    hello: Frame,
    server_key: Frame,
    report: AttestationReport,
    client_key: PublicKey,
    client_nonce: [u8; 32],
}

/// Handshake endpoint running inside a TEE instance.
pub struct EnclaveEndpoint {
    instance: TeeInstance,
    pending: BTreeMap<[u8; 32], PendingHandshake>,
    sessions: BTreeMap<Digest, AttestedSession>,
    height: u64,
}

impl EnclaveEndpoint {
    pub fn new(instance: TeeInstance) -> Self {
        EnclaveEndpoint {
            instance,
            pending: BTreeMap::new(),
            sessions: BTreeMap::new(),
            height: 0,
        }
    }

    pub fn instance(&self) -> &TeeInstance {
        &self.instance
    }

    pub fn set_height(&mut self, height: u64) {
        self.height = height;
    }

    pub fn session(&self, id: &Digest) -> Option<&AttestedSession> {
        self.sessions.get(id)
    }

    pub fn session_mut(&mut self, id: &Digest) -> Option<&mut AttestedSession> {
        self.sessions.get_mut(id)
    }

    fn finish(&mut self, sealed: &SealedEnvelope) -> Result<Frame, String> {
        let secret = self.instance.open(sealed).map_err(|e| e.to_string())?;
        let client_nonce: [u8; 32] = secret
            .get(32..64)
            .and_then(|s| s.try_into().ok())
            .ok_or("malformed secret")?;
        let p = self
            .pending
            .remove(&client_nonce)
            .ok_or("no pending handshake for this secret")?;
        let (session_id, session_key) =
            session_secrets(&secret[..32], &p.hello, &p.server_key, &p.report, &p.client_nonce);
        self.sessions.insert(
            session_id,
            AttestedSession {
                session_id,
                session_key,
                report: p.report,
                server_key: *self.instance.public_key(),
                client_key: p.client_key,
                client_nonce: p.client_nonce,
                established_at: self.height,
                verification_skipped: false,
                role: Role::Server,
                send_seq: 0,
                recv_seq: 0,
            },
        );
        Ok(Frame::ServerFinish {
            session_id,
            confirm: finish_confirm(&session_key),
        })
    }
}

impl HandshakeServer for EnclaveEndpoint {
    fn respond(&mut self, frame: &Frame) -> Frame {
        match frame {
            Frame::ClientHello {
                client_nonce,
                client_key,
            } => {
                let report = self.instance.attest(&report_nonce(client_nonce));
                let server_key = Frame::ServerKey {
                    public_key: *self.instance.public_key(),
                    epoch: self.instance.epoch(),
                    report: report.clone(),
                };
                self.pending.insert(
                    *client_nonce,
                    PendingHandshake {
                        hello: frame.clone(),
                        server_key: server_key.clone(),
                        report,
                        client_key: *client_key,
                        client_nonce: *client_nonce,
                    },
                );
                server_key
            }
            Frame::ClientFinish { sealed_secret } => match self.finish(sealed_secret) {
                Ok(f) => f,
                Err(reason) => Frame::Alert { reason },
            },
            other => Frame::Alert {
                reason: format!("unexpected {}", other.tag()),
            },
        }
    }
}

/// Everything the client side of a handshake needs.
pub struct HandshakeParams<'a> {
    pub client: &'a KeyPair,
    pub client_nonce: [u8; 32],
    /// Key id the client expects, typically from the ledger record.
    pub expected_key: Option<KeyId>,
    /// Epoch the client expects the enclave to report.
    pub expected_epoch: Option<u64>,
    pub policy: &'a PolicySet,
    pub roots: &'a PlatformRoots,
    pub community_override: bool,
    pub height: u64,
}

fn exchange<S: HandshakeServer + ?Sized>(server: &mut S, frame: Frame, transcript: &mut SessionTranscript) -> Frame {
    transcript.sent(&frame);
    let reply = server.respond(&frame);
    transcript.received(&reply);
    reply
}

/// Runs the client side of the handshake. On any error no `ClientFinish`
/// has been sent unless the failure came from the server's finish.
pub fn handshake<S: HandshakeServer + ?Sized>(
    params: &HandshakeParams<'_>,
    server: &mut S,
    cache: &mut CertificateCache,
    transcript: &mut SessionTranscript,
) -> Result<AttestedSession, AtlsError> {
    let client_nonce = params.client_nonce;
    let hello = Frame::ClientHello {
        client_nonce,
        client_key: *params.client.public_key(),
    };
    let server_key = exchange(server, hello.clone(), transcript);
    let (public_key, epoch, report) = match &server_key {
        Frame::ServerKey {
            public_key,
            epoch,
            report,
        } => (*public_key, *epoch, report.clone()),
        Frame::Alert { reason } => return Err(AtlsError::Alert(reason.clone())),
        other => return Err(AtlsError::UnexpectedFrame(other.tag())),
    };

    if report.nonce != report_nonce(&client_nonce) {
        return Err(AtlsError::StaleReport(
            "report nonce does not match this session".into(),
        ));
    }
    if report.epoch != epoch || params.expected_epoch.is_some_and(|e| e != epoch) {
        return Err(AtlsError::StaleReport(format!(
            "report epoch {}, server epoch {epoch}, expected {:?}",
            report.epoch, params.expected_epoch
        )));
    }
    let key_id = public_key.key_id();
    if let Some(expected) = params.expected_key {
        if expected != key_id {
            return Err(AtlsError::UnexpectedKey {
                expected,
                actual: key_id,
            });
        }
    }
    let cache_hit = cache.lookup(&key_id, params.height).is_some();
    if cache_hit {
        if !report.binds(&public_key) {
            return Err(AtlsError::AttestationInvalid(AttestationFailure::KeyBindingMismatch));
        }
    } else {
        verify_report(
            &report,
            &public_key,
            params.policy,
            params.roots,
            params.community_override,
        )
        .map_err(AtlsError::AttestationInvalid)?;
        cache.insert(key_id, report.digest(), params.height);
    }
    transcript.entries.push(TranscriptEntry::Verified { cache_hit });

    let seed = params.client.private_seed();
    let mut secret = digest_parts(&[b"confidant/atls/secret", seed, &client_nonce])
        .0
        .to_vec();
    secret.extend_from_slice(&client_nonce);
    let rng_seed = digest_parts(&[b"confidant/atls/finish-rng", seed, &client_nonce]).0;
    let finish = Frame::ClientFinish {
        sealed_secret: crypto::seal(&secret, &public_key, &rng_seed),
    };
    let reply = exchange(server, finish, transcript);
    let (session_id, confirm) = match reply {
        Frame::ServerFinish { session_id, confirm } => (session_id, confirm),
        Frame::Alert { reason } => return Err(AtlsError::Alert(reason)),
        other => return Err(AtlsError::UnexpectedFrame(other.tag())),
    };
    let (expected_id, session_key) = session_secrets(&secret[..32], &hello, &server_key, &report, &client_nonce);
    if session_id != expected_id || confirm != finish_confirm(&session_key) {
        return Err(AtlsError::FinishMismatch);
    }
    Ok(AttestedSession {
        session_id,
        session_key,
        report,
        server_key: public_key,
        client_key: *params.client.public_key(),
        client_nonce,
        established_at: params.height,
        verification_skipped: cache_hit,
        role: Role::Client,
        send_seq: 0,
        recv_seq: 0,
    })
}

/// Signed statement for the ledger that this session verified the node.
pub fn make_confirmation(session: &AttestedSession, job_id: &JobId, client: &KeyPair) -> Confirmation {
    let report_digest = session.report_digest();
    Confirmation {
        job_id: *job_id,
        report_digest,
        passed: true,
        signature: crypto::sign(client, &confirmation_payload(job_id, &report_digest, true)),
    }
}

pub fn make_failure_evidence(job: &JobRequest, key_id: &KeyId, reason: &str, client: &KeyPair) -> FailureEvidence {
    FailureEvidence {
        job_id: job.job_id,
        key_id: *key_id,
        reason: reason.to_string(),
        signature: crypto::sign(client, &failure_payload(&job.job_id, key_id, reason)),
    }
}

/// Reports a failed handshake and returns the job to the queue without the
/// failing node.
pub fn switch_node(ledger: &mut Ledger, evidence: &FailureEvidence) -> Result<JobRequest, LedgerError> {
    ledger.switch_node(evidence)
}

/// Client nonce for the `n`th handshake of a client.
pub fn client_nonce(client: &KeyPair, n: u64) -> [u8; 32] {
    digest_parts(&[b"confidant/atls/client-nonce", client.private_seed(), &n.to_le_bytes()]).0
}

/// Throwaway client identity for tests and tooling.
pub fn ephemeral_client(seed: &[u8]) -> KeyPair {
    generate_keypair(&digest(seed).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Measurement;
    use crate::tee::{Fault, FaultSet, PlatformKind, TeePlatform};

    struct Fixture {
        platform: TeePlatform,
        policy: PolicySet,
        roots: PlatformRoots,
        client: KeyPair,
    }

    fn fixture() -> Fixture {
        let platform = TeePlatform::new(PlatformKind::SimTdx, &[3; 32]);
        let image = digest(b"image");
        let vendor = platform
            .vendor_measurements()
            .into_iter()
            .map(|(c, d)| Measurement::new(c, d, ""));
        let policy = PolicySet::from_parts(
            1,
            vendor,
            [Measurement::new(crate::policy::MeasurementClass::VmImage, image, "img")],
            [],
        )
        .unwrap();
        let roots = PlatformRoots::from_platforms([&platform]);
        Fixture {
            platform,
            policy,
            roots,
            client: ephemeral_client(b"client"),
        }
    }

    fn params<'a>(f: &'a Fixture, n: u64, height: u64) -> HandshakeParams<'a> {
        HandshakeParams {
            client: &f.client,
            client_nonce: client_nonce(&f.client, n),
            expected_key: None,
            expected_epoch: None,
            policy: &f.policy,
            roots: &f.roots,
            community_override: true,
            height,
        }
    }

    fn endpoint(f: &Fixture, faults: FaultSet) -> EnclaveEndpoint {
        EnclaveEndpoint::new(TeeInstance::spawn(&f.platform, digest(b"image"), &[9; 32]).with_faults(faults))
    }

    #[test]
    fn nominal_handshake_and_app_data() {
        let f = fixture();
        let mut server = endpoint(&f, FaultSet::none());
        let mut cache = CertificateCache::default();
        let mut t = SessionTranscript::default();
        let mut s = handshake(&params(&f, 0, 0), &mut server, &mut cache, &mut t).unwrap();
        assert!(!s.verification_skipped);
        assert_eq!(cache.len(), 1);
        assert_eq!(
            t.tags(),
            ["ClientHello", "ServerKey", "Verified", "ClientFinish", "ServerFinish"]
        );

        let frame = s.seal(b"hello enclave");
        let server_session = server.session_mut(&s.session_id).unwrap();
        assert_eq!(server_session.open(&frame).unwrap(), b"hello enclave");
        let back = server_session.seal(b"hi");
        assert_eq!(s.open(&back).unwrap(), b"hi");
        assert!(matches!(
            server.session_mut(&s.session_id).unwrap().open(&frame),
            Err(AtlsError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn forged_root_aborts_before_finish() {
        let f = fixture();
        let mut server = endpoint(&f, [Fault::ForgedRootSignature].into_iter().collect());
        let mut t = SessionTranscript::default();
        let err = handshake(&params(&f, 0, 0), &mut server, &mut CertificateCache::default(), &mut t).unwrap_err();
        assert!(matches!(
            err,
            AtlsError::AttestationInvalid(AttestationFailure::BadRootSignature(_))
        ));
        assert_eq!(t.tags(), ["ClientHello", "ServerKey"]);
        assert_eq!(t.app_data_frames(), 0);
    }

    #[test]
    fn stale_epoch_report_detected() {
        let f = fixture();
        let mut server = endpoint(&f, [Fault::StaleEpochReport].into_iter().collect());
        let err = handshake(
            &params(&f, 0, 0),
            &mut server,
            &mut CertificateCache::default(),
            &mut SessionTranscript::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AtlsError::StaleReport(_)));
    }

    struct Replayer {
        inner: EnclaveEndpoint,
        recorded: Option<Frame>,
    }

    impl HandshakeServer for Replayer {
        fn respond(&mut self, frame: &Frame) -> Frame {
            let reply = self.inner.respond(frame);
            if matches!(reply, Frame::ServerKey { .. }) {
                return self.recorded.get_or_insert(reply).clone();
            }
            reply
        }
    }

    #[test]
    fn replayed_report_is_stale() {
        let f = fixture();
        let mut server = Replayer {
            inner: endpoint(&f, FaultSet::none()),
            recorded: None,
        };
        let mut cache = CertificateCache::default();
        handshake(
            &params(&f, 0, 0),
            &mut server,
            &mut cache,
            &mut SessionTranscript::default(),
        )
        .unwrap();
        let err = handshake(
            &params(&f, 1, 1),
            &mut server,
            &mut cache,
            &mut SessionTranscript::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AtlsError::StaleReport(_)));
    }

    #[test]
    fn distinct_nonces_give_distinct_report_nonces() {
        let f = fixture();
        let mut server = endpoint(&f, FaultSet::none());
        let mut cache = CertificateCache::new(0);
        let a = handshake(
            &params(&f, 0, 0),
            &mut server,
            &mut cache,
            &mut SessionTranscript::default(),
        )
        .unwrap();
        let b = handshake(
            &params(&f, 1, 0),
            &mut server,
            &mut cache,
            &mut SessionTranscript::default(),
        )
        .unwrap();
        assert_ne!(a.report.nonce, b.report.nonce);
        assert_ne!(a.session_id, b.session_id);
    }

    #[test]
    fn cache_skips_within_ttl_and_expires_after() {
        let f = fixture();
        let mut server = endpoint(&f, FaultSet::none());
        let mut cache = CertificateCache::new(50);
        let mut t = SessionTranscript::default();
        handshake(&params(&f, 0, 10), &mut server, &mut cache, &mut t).unwrap();
        let hit = handshake(&params(&f, 1, 59), &mut server, &mut cache, &mut t).unwrap();
        assert!(hit.verification_skipped);
        let miss = handshake(&params(&f, 2, 60), &mut server, &mut cache, &mut t).unwrap();
        assert!(!miss.verification_skipped);
        assert_eq!(cache.get(&server.instance().key_id()).unwrap().verified_at, 60);
    }

    #[test]
    fn expected_key_enforced() {
        let f = fixture();
        let mut server = endpoint(&f, FaultSet::none());
        let mut p = params(&f, 0, 0);
        p.expected_key = Some(digest(b"someone else"));
        let err = handshake(
            &p,
            &mut server,
            &mut CertificateCache::default(),
            &mut SessionTranscript::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AtlsError::UnexpectedKey { .. }));
    }

    #[test]
    fn frames_round_trip() {
        let f = fixture();
        let mut server = endpoint(&f, FaultSet::none());
        let mut t = SessionTranscript::default();
        let mut s = handshake(&params(&f, 0, 0), &mut server, &mut CertificateCache::default(), &mut t).unwrap();
        let data = s.seal(b"x");
        for frame in t.frames().chain([&data, &Frame::Alert { reason: "bye".into() }]) {
            assert_eq!(&Frame::from_bytes(&frame.to_bytes()).unwrap(), frame);
        }
    }
}
