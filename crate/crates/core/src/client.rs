// SPDX-License-Identifier: Apache-2.0

//! The user side: pick and re-verify nodes, seal inputs, submit jobs in
//! either attestation mode, and open results.
//!
//! Every byte string the client hands to the ledger, storage or network is
//! appended to [`Client::writes`], so tests can check that no plaintext
//! ever leaves the client.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::atls::{
    self, client_nonce, handshake, make_confirmation, make_failure_evidence, AtlsError, AttestedSession,
    CertificateCache, Frame, HandshakeParams, HandshakeServer, SessionTranscript,
};
use crate::crypto::{
    self, digest_parts, generate_keypair, CryptoError, JobId, KeyId, KeyPair, PublicKey, SealedEnvelope,
};
use crate::ledger::{
    AttestationMode, JobPayload, JobRequest, JobStatus, Ledger, LedgerError, NodeRecord, ReportLocation, SubmitJob,
};
use crate::storage::ContentStore;
use crate::tee::{verify_report, AttestationReport, PlatformKind};
use crate::Defenses;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no verified node for platform {0}")]
    NoVerifiedNode(PlatformKind),
    #[error("ledger lists {key_id:?} as verified but its report fails local checks: {reason}")]
    RecordVerificationFailed { key_id: KeyId, reason: String },
    #[error("result does not decrypt: {0}")]
    DecryptFailed(CryptoError),
    #[error("stored object failed its integrity check: {0}")]
    IntegrityMismatch(String),
    #[error("job is {0}, not completed")]
    NotCompleted(JobStatus),
    #[error("unknown job {0:?}")]
    UnknownJob(JobId),
    #[error("handshake failed: {0}")]
    Handshake(AtlsError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("storage: {0}")]
    Storage(String),
}

/// Fetches the report behind a ledger record.
pub fn fetch_report(record: &NodeRecord, storage: &ContentStore) -> Result<AttestationReport, String> {
    match &record.report {
        ReportLocation::OnChain(r) => Ok(r.clone()),
        ReportLocation::Stored(r) => {
            let bytes = storage.get(r).map_err(|e| e.to_string())?;
            AttestationReport::from_bytes(&bytes).map_err(|e| e.to_string())
        }
    }
}

/// Checks a ledger record locally: root signature, key binding, policy and
/// epoch.
pub fn reverify_record(
    ledger: &Ledger,
    record: &NodeRecord,
    storage: &ContentStore,
    community_override: bool,
) -> Result<(), ClientError> {
    let fail = |reason: String| ClientError::RecordVerificationFailed {
        key_id: record.key_id,
        reason,
    };
    let report = fetch_report(record, storage).map_err(fail)?;
    if report.digest() != record.report_digest {
        return Err(fail("report does not match the recorded digest".into()));
    }
    verify_report(
        &report,
        &record.public_key,
        ledger.policy(),
        ledger.roots(),
        community_override,
    )
    .map_err(|e| fail(e.to_string()))?;
    if report.epoch != record.epoch {
        return Err(fail(format!(
            "report epoch {} but record epoch {}",
            report.epoch, record.epoch
        )));
    }
    Ok(())
}

/// Picks one Verified node per platform, re-verifies each, seals
/// `plaintext` in layers (first platform outermost), and returns the
/// submission.
pub fn build_onchain_request(
    ledger: &Ledger,
    storage: &ContentStore,
    plaintext: &[u8],
    platform_requirements: &[PlatformKind],
    client: &KeyPair,
    seed: &[u8; 32],
    defenses: &Defenses,
) -> Result<SubmitJob, ClientError> {
    let mut rng = ChaCha20Rng::from_seed(digest_parts(&[b"confidant/client/select", seed]).0);
    let mut recipients: Vec<PublicKey> = Vec::new();
    let mut targets = Vec::new();
    for platform in platform_requirements {
        let eligible = ledger.eligible_nodes(*platform);
        if eligible.is_empty() {
            return Err(ClientError::NoVerifiedNode(*platform));
        }
        let record = eligible[rng.gen_range(0..eligible.len())];
        if defenses.client_reverify {
            reverify_record(ledger, record, storage, defenses.community_override)?;
        }
        recipients.push(record.public_key);
        targets.push(record.key_id);
    }
    let envelope = crypto::seal_layered(
        plaintext,
        &recipients,
        &digest_parts(&[b"confidant/client/seal", seed]).0,
    );
    let payload = place(envelope, ledger.config().inline_limit, storage)?;
    Ok(SubmitJob {
        client_public_key: *client.public_key(),
        attestation_mode: AttestationMode::OnChainAttested,
        payload: Some(payload),
        platform_requirements: platform_requirements.to_vec(),
        targets,
        deadline: None,
    })
}

/// Inline if the envelope fits under `inline_limit`, otherwise stored.
pub fn place(envelope: SealedEnvelope, inline_limit: usize, storage: &ContentStore) -> Result<JobPayload, ClientError> {
    if envelope.encoded_len() <= inline_limit {
        Ok(JobPayload::Inline(envelope))
    } else {
        storage
            .put(&envelope.to_bytes())
            .map(JobPayload::Stored)
            .map_err(|e| ClientError::Storage(e.to_string()))
    }
}

/// Resolves a payload to its envelope, digest-checking stored objects.
pub fn resolve_payload(payload: &JobPayload, storage: &ContentStore) -> Result<SealedEnvelope, ClientError> {
    match payload {
        JobPayload::Inline(env) => Ok(env.clone()),
        JobPayload::Stored(r) => {
            let bytes = storage.get(r).map_err(|e| match e {
                crate::storage::StorageError::IntegrityMismatch { .. } => ClientError::IntegrityMismatch(e.to_string()),
                other => ClientError::Storage(other.to_string()),
            })?;
            SealedEnvelope::from_bytes(&bytes).map_err(|e| ClientError::Storage(e.to_string()))
        }
    }
}

pub fn open_result(job: &JobRequest, storage: &ContentStore, client: &KeyPair) -> Result<Vec<u8>, ClientError> {
    if job.status != JobStatus::Completed {
        return Err(ClientError::NotCompleted(job.status));
    }
    let result = job.result.as_ref().ok_or(ClientError::NotCompleted(job.status))?;
    let envelope = resolve_payload(result, storage)?;
    crypto::open(&envelope, client).map_err(ClientError::DecryptFailed)
}

/// Plaintext carried over an attested session for a user-attested job.
pub fn session_input(job_id: &JobId, input: &[u8]) -> Vec<u8> {
    let mut out = job_id.as_bytes().to_vec();
    out.extend_from_slice(input);
    out
}

/// A client actor with a deterministic key and nonce stream.
pub struct Client {
    keypair: KeyPair,
    seed: [u8; 32],
    counter: u64,
    handshakes: u64,
    cache: CertificateCache,
    defenses: Defenses,
    writes: Vec<Vec<u8>>,
}

impl Client {
    pub fn new(seed: &[u8; 32], cache_ttl: u64, defenses: Defenses) -> Self {
        Client {
            keypair: generate_keypair(&digest_parts(&[b"confidant/client-key", seed]).0),
            seed: *seed,
            counter: 0,
            handshakes: 0,
            cache: CertificateCache::new(cache_ttl),
            defenses,
            writes: Vec::new(),
        }
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public_key()
    }

    pub fn cache(&self) -> &CertificateCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut CertificateCache {
        &mut self.cache
    }

    /// Everything this client sent to the ledger, storage or network.
    pub fn writes(&self) -> &[Vec<u8>] {
        &self.writes
    }

    fn next_seed(&mut self) -> [u8; 32] {
        self.counter += 1;
        digest_parts(&[b"confidant/client/op", &self.seed, &self.counter.to_le_bytes()]).0
    }

    fn log_payload(&mut self, payload: &Option<JobPayload>, storage: &ContentStore) {
        match payload {
            Some(JobPayload::Inline(env)) => self.writes.push(env.to_bytes()),
            Some(JobPayload::Stored(r)) => {
                self.writes.push(r.to_bytes().to_vec());
                if let Ok(bytes) = storage.get(r) {
                    self.writes.push(bytes);
                }
            }
            None => {}
        }
    }

    pub fn submit_onchain(
        &mut self,
        ledger: &mut Ledger,
        storage: &ContentStore,
        plaintext: &[u8],
        platforms: &[PlatformKind],
    ) -> Result<JobRequest, ClientError> {
        let seed = self.next_seed();
        let req = build_onchain_request(
            ledger,
            storage,
            plaintext,
            platforms,
            &self.keypair,
            &seed,
            &self.defenses,
        )?;
        self.log_payload(&req.payload, storage);
        Ok(ledger.submit_job(req)?)
    }

    pub fn submit_user_attested(
        &mut self,
        ledger: &mut Ledger,
        platform: PlatformKind,
    ) -> Result<JobRequest, ClientError> {
        self.writes.push(self.keypair.public_key().to_bytes().to_vec());
        Ok(ledger.submit_job(SubmitJob {
            client_public_key: *self.keypair.public_key(),
            attestation_mode: AttestationMode::UserAttested,
            payload: None,
            platform_requirements: vec![platform],
            targets: Vec::new(),
            deadline: None,
        })?)
    }

    /// Handshakes with the node assigned to `job_id`. On success the job is
    /// confirmed on the ledger (unless `confirm` is false, as a bailing user
    /// would do) and the sealed input frame is returned for delivery. On a handshake failure the node is reported and the job
    /// returns to the queue.
    pub fn attest_and_send<S: HandshakeServer + ?Sized>(
        &mut self,
        ledger: &mut Ledger,
        job_id: &JobId,
        server: &mut S,
        input: &[u8],
        confirm: bool,
        transcript: &mut SessionTranscript,
    ) -> Result<(AttestedSession, Frame), ClientError> {
        let job = ledger.job(job_id).ok_or(ClientError::UnknownJob(*job_id))?.clone();
        let key_id = job.current_holder().ok_or(ClientError::NotCompleted(job.status))?;
        let record = ledger
            .node(&key_id)
            .filter(|r| r.is_assignable())
            .ok_or(ClientError::NoVerifiedNode(job.platform_requirements[0]))?
            .clone();
        let nonce = client_nonce(&self.keypair, self.handshakes);
        self.handshakes += 1;
        let params = HandshakeParams {
            client: &self.keypair,
            client_nonce: nonce,
            expected_key: Some(key_id),
            expected_epoch: Some(record.epoch),
            policy: ledger.policy(),
            roots: ledger.roots(),
            community_override: self.defenses.community_override,
            height: ledger.height(),
        };
        let outcome = handshake(&params, server, &mut self.cache, transcript);
        let mut session = match outcome {
            Ok(s) => s,
            Err(e) => {
                let evidence = make_failure_evidence(&job, &key_id, &e.to_string(), &self.keypair);
                atls::switch_node(ledger, &evidence)?;
                return Err(ClientError::Handshake(e));
            }
        };
        for f in transcript.frames() {
            if matches!(f, Frame::ClientHello { .. } | Frame::ClientFinish { .. }) {
                self.writes.push(f.to_bytes());
            }
        }
        if confirm {
            let confirmation = make_confirmation(&session, job_id, &self.keypair);
            ledger.confirm_attestation(job_id, &confirmation)?;
        }
        let frame = session.seal(&session_input(job_id, input));
        transcript.entries.push(atls::TranscriptEntry::Sent(frame.clone()));
        self.writes.push(frame.to_bytes());
        Ok((session, frame))
    }

    pub fn open_result(&self, job: &JobRequest, storage: &ContentStore) -> Result<Vec<u8>, ClientError> {
        open_result(job, storage, &self.keypair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::committee::CommitteeRoster;
    use crate::crypto::digest;
    use crate::ledger::{Evidence, Genesis, LedgerConfig, Registration};
    use crate::policy::{Measurement, MeasurementClass, PolicySet};
    use crate::tee::{execute_workload, PlatformRoots, TeeInstance, TeePlatform};

    struct World {
        ledger: Ledger,
        storage: ContentStore,
        nodes: Vec<TeeInstance>,
    }

    fn world() -> World {
        let image = digest(b"image");
        let platforms: Vec<_> = PlatformKind::ALL
            .iter()
            .map(|k| TeePlatform::new(*k, &[k.code(); 32]))
            .collect();
        let vendor: Vec<_> = platforms
            .iter()
            .flat_map(|p| p.vendor_measurements())
            .map(|(c, d)| Measurement::new(c, d, ""))
            .collect();
        let policy =
            PolicySet::from_parts(1, vendor, [Measurement::new(MeasurementClass::VmImage, image, "")], []).unwrap();
        let mut ledger = Ledger::new(
            LedgerConfig::default(),
            Genesis {
                policy,
                policy_updater: *generate_keypair(&[0; 32]).public_key(),
                roots: PlatformRoots::from_platforms(&platforms),
                committee: CommitteeRoster::new([]),
            },
        );
        let nodes: Vec<_> = platforms
            .iter()
            .map(|p| TeeInstance::spawn(p, image, &[p.kind().code() + 10; 32]))
            .collect();
        for n in &nodes {
            ledger
                .register_node(Registration {
                    node_id: n.instance_id(),
                    platform: n.platform(),
                    public_key: *n.public_key(),
                    epoch: n.epoch(),
                    evidence: Evidence::Direct(n.attest(&[0; 32])),
                })
                .unwrap();
        }
        World {
            ledger,
            storage: ContentStore::in_memory(),
            nodes,
        }
    }

    #[test]
    fn two_platforms_give_two_layers_outer_first() {
        let w = world();
        let client = generate_keypair(&[1; 32]);
        let req = build_onchain_request(
            &w.ledger,
            &w.storage,
            b"secret prompt",
            &[PlatformKind::SimTdx, PlatformKind::SimSev],
            &client,
            &[2; 32],
            &Defenses::default(),
        )
        .unwrap();
        let Some(JobPayload::Inline(outer)) = req.payload else {
            panic!("expected inline payload")
        };
        let tdx = &w.nodes[0];
        let sev = &w.nodes[1];
        assert_eq!(outer.recipient_key_id, tdx.key_id());
        let inner = SealedEnvelope::from_bytes(&tdx.open(&outer).unwrap()).unwrap();
        assert_eq!(inner.recipient_key_id, sev.key_id());
        assert_eq!(sev.open(&inner).unwrap(), b"secret prompt");
    }

    #[test]
    fn missing_platform_is_reported() {
        let mut w = world();
        let sev = w.nodes[1].key_id();
        w.ledger.revoke_key(&sev, "test").unwrap();
        let err = build_onchain_request(
            &w.ledger,
            &w.storage,
            b"x",
            &[PlatformKind::SimSev],
            &generate_keypair(&[1; 32]),
            &[2; 32],
            &Defenses::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ClientError::NoVerifiedNode(PlatformKind::SimSev)));
    }

    #[test]
    fn tampered_record_caught_by_reverification() {
        let mut w = world();
        let tdx = w.nodes[0].key_id();
        let bogus = w.nodes[1].attest(&[0; 32]);
        w.ledger.adversary_replace_report(&tdx, bogus);
        let args = |d: Defenses| {
            build_onchain_request(
                &w.ledger,
                &w.storage,
                b"x",
                &[PlatformKind::SimTdx],
                &generate_keypair(&[1; 32]),
                &[2; 32],
                &d,
            )
        };
        assert!(matches!(
            args(Defenses::default()),
            Err(ClientError::RecordVerificationFailed { .. })
        ));
        let off = Defenses {
            client_reverify: false,
            ..Defenses::default()
        };
        assert!(args(off).is_ok());
    }

    #[test]
    fn large_inputs_go_to_storage() {
        let w = world();
        let big = vec![7u8; 10_000];
        let req = build_onchain_request(
            &w.ledger,
            &w.storage,
            &big,
            &[PlatformKind::SimTdx],
            &generate_keypair(&[1; 32]),
            &[2; 32],
            &Defenses::default(),
        )
        .unwrap();
        let Some(JobPayload::Stored(r)) = &req.payload else {
            panic!("expected stored payload")
        };
        let env = resolve_payload(req.payload.as_ref().unwrap(), &w.storage).unwrap();
        assert_eq!(w.nodes[0].open(&env).unwrap(), big);
        w.storage.corrupt(&r.content_digest);
        assert!(matches!(
            resolve_payload(req.payload.as_ref().unwrap(), &w.storage),
            Err(ClientError::IntegrityMismatch(_))
        ));
    }

    #[test]
    fn open_result_round_trip_and_wrong_key() {
        let mut w = world();
        let mut client = Client::new(&[5; 32], 50, Defenses::default());
        let job = client
            .submit_onchain(&mut w.ledger, &w.storage, b"question", &[PlatformKind::SimTdx])
            .unwrap();
        w.ledger.assign_jobs(&[0; 32]);
        let node = &w.nodes[0];
        w.ledger.start_execution(&job.job_id, &node.key_id()).unwrap();
        let output = node.execute_workload(b"question");
        let sealed = crypto::seal(&output, client.public_key(), &[4; 32]);
        let done = w
            .ledger
            .post_result(&job.job_id, &node.key_id(), JobPayload::Inline(sealed))
            .unwrap();
        assert_eq!(
            client.open_result(&done, &w.storage).unwrap(),
            execute_workload(b"question")
        );

        let stranger = generate_keypair(&[6; 32]);
        assert!(matches!(
            open_result(&done, &w.storage, &stranger),
            Err(ClientError::DecryptFailed(CryptoError::WrongRecipient { .. }))
        ));
        assert!(client.writes().iter().all(|w| !w.windows(8).any(|s| s == b"question")));
    }
}
