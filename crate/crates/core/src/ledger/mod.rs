// SPDX-License-Identifier: Apache-2.0

//! The simulated contract: one serialized state machine holding node
//! records, the measurement policy, jobs and an append-only transcript.
//!
//! Every mutating call appends at least one [`LedgerEvent`]. Time is the
//! ledger height; [`Ledger::seal_height`] closes the current height with a
//! `HeightSealed` event, so every height from 0 appears in the transcript.
//!
//! Job lifecycle:
//!
//! ```text
//! Submitted -> Assigned -> [AttestationConfirmed] -> Executing -> Completed | Failed
//!              Assigned | AttestationConfirmed -> Expired       (deadline passed)
//!              Assigned -> Submitted                            (client switched node)
//! ```
//!
//! The bracketed step is mandatory for user-attested jobs.

mod events;
mod replay;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use events::{from_jsonl, to_jsonl, EventBody, EventKind, LedgerEvent, RouteHop, TranscriptError};
pub use replay::{validate_transcript, ReplayReport, Violation, ViolationKind};

use crate::committee::{valid_signers, CommitteeAgreement, CommitteeRoster, CommitteeVerdict};
use crate::crypto::{self, digest_parts, Digest, JobId, KeyId, NodeId, PublicKey, SealedEnvelope, Signature};
use crate::policy::{PolicyDelta, PolicyError, PolicySet};
use crate::storage::{ContentStore, StorageRef};
use crate::tee::{verify_report, AttestationFailure, AttestationReport, PlatformKind, PlatformRoots};
use crate::wire::{Decoder, Encoder, WireError};
use crate::Defenses;

pub const DEFAULT_INLINE_LIMIT: usize = 4096;
pub const DEFAULT_DEADLINE: u64 = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerConfig {
    /// Largest encoded envelope stored inline; larger payloads and results
    /// must go through storage.
    pub inline_limit: usize,
    /// Relative deadline, in heights, applied when a job names none.
    pub default_deadline: u64,
    pub committee_threshold: usize,
    pub defenses: Defenses,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            inline_limit: DEFAULT_INLINE_LIMIT,
            default_deadline: DEFAULT_DEADLINE,
            committee_threshold: crate::committee::DEFAULT_THRESHOLD,
            defenses: Defenses::default(),
        }
    }
}

/// State fixed at ledger creation.
#[derive(Clone, Debug)]
pub struct Genesis {
    pub policy: PolicySet,
    pub policy_updater: PublicKey,
    pub roots: PlatformRoots,
    pub committee: CommitteeRoster,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AttestationStatus {
    Pending,
    Verified,
    Rejected,
}

impl AttestationStatus {
    pub fn code(self) -> u8 {
        match self {
            AttestationStatus::Pending => 1,
            AttestationStatus::Verified => 2,
            AttestationStatus::Rejected => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1 => Ok(AttestationStatus::Pending),
            2 => Ok(AttestationStatus::Verified),
            3 => Ok(AttestationStatus::Rejected),
            other => Err(WireError::invalid("attestation status", other.to_string())),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AttestationMode {
    UserAttested,
    OnChainAttested,
}

impl AttestationMode {
    pub fn code(self) -> u8 {
        match self {
            AttestationMode::UserAttested => 1,
            AttestationMode::OnChainAttested => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1 => Ok(AttestationMode::UserAttested),
            2 => Ok(AttestationMode::OnChainAttested),
            other => Err(WireError::invalid("attestation mode", other.to_string())),
        }
    }
}

/// Where a record's attestation report lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReportLocation {
    OnChain(AttestationReport),
    Stored(StorageRef),
}

/// How a node presents its evidence at registration.
#[derive(Clone, Debug)]
pub enum Evidence {
    /// The ledger verifies the report itself.
    Direct(AttestationReport),
    /// The report bytes sit in storage; a committee verifies them later.
    Committee(StorageRef),
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub node_id: NodeId,
    pub platform: PlatformKind,
    pub public_key: PublicKey,
    pub epoch: u64,
    pub evidence: Evidence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub platform: PlatformKind,
    pub public_key: PublicKey,
    pub key_id: KeyId,
    pub attestation_status: AttestationStatus,
    pub epoch: u64,
    pub revoked: bool,
    pub registered_at: u64,
    pub report_digest: Digest,
    pub report: ReportLocation,
    pub rejection: Option<String>,
}

impl NodeRecord {
    pub fn is_assignable(&self) -> bool {
        self.attestation_status == AttestationStatus::Verified && !self.revoked
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobPayload {
    Inline(SealedEnvelope),
    Stored(StorageRef),
}

impl JobPayload {
    pub fn encode(&self, enc: &mut Encoder) {
        match self {
            JobPayload::Inline(env) => {
                enc.u8(1);
                env.encode(enc);
            }
            JobPayload::Stored(r) => {
                enc.u8(2);
                r.encode(enc);
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        match dec.u8()? {
            1 => Ok(JobPayload::Inline(SealedEnvelope::decode(dec)?)),
            2 => Ok(JobPayload::Stored(StorageRef::decode(dec)?)),
            other => Err(WireError::invalid("payload tag", other.to_string())),
        }
    }

    /// Bytes this payload occupies in ledger state.
    pub fn ledger_size(&self) -> usize {
        match self {
            JobPayload::Inline(env) => env.encoded_len(),
            JobPayload::Stored(_) => StorageRef::ENCODED_LEN,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum JobStatus {
    Submitted,
    Assigned,
    AttestationConfirmed,
    Executing,
    Completed,
    Failed,
    Expired,
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JobRequest {
    pub job_id: JobId,
    pub client_public_key: PublicKey,
    pub attestation_mode: AttestationMode,
    /// Absent for user-attested jobs, whose input travels over the attested
    /// session instead of the ledger.
    pub payload: Option<JobPayload>,
    pub platform_requirements: Vec<PlatformKind>,
    /// Key ids the client sealed for, one per layer. Empty means any
    /// eligible node may take the job.
    pub targets: Vec<KeyId>,
    pub excluded: BTreeSet<KeyId>,
    pub assigned_node: Option<NodeId>,
    /// Assigned key per layer, outermost first.
    pub route: Vec<KeyId>,
    /// Index into `route` of the node currently holding the job.
    pub layer: usize,
    pub status: JobStatus,
    pub result: Option<JobPayload>,
    pub confirmed_report: Option<Digest>,
    pub deadline: u64,
    pub submitted_at: u64,
    pub requeued_from: Option<JobId>,
}

impl JobRequest {
    pub fn current_holder(&self) -> Option<KeyId> {
        self.route.get(self.layer).copied()
    }

    pub fn is_final_layer(&self) -> bool {
        !self.route.is_empty() && self.layer + 1 == self.route.len()
    }

    pub fn is_in_flight(&self) -> bool {
        matches!(
            self.status,
            JobStatus::Assigned | JobStatus::AttestationConfirmed | JobStatus::Executing
        )
    }

    /// Canonical encoding of the ledger-resident job state.
    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.job_id.as_bytes());
        self.client_public_key.encode(enc);
        enc.u8(self.attestation_mode.code());
        match &self.payload {
            Some(p) => p.encode(enc),
            None => {
                enc.u8(0);
            }
        }
        enc.u32(self.platform_requirements.len() as u32);
        for p in &self.platform_requirements {
            enc.u8(p.code());
        }
        enc.u32(self.route.len() as u32);
        for k in &self.route {
            enc.bytes(k.as_bytes());
        }
        enc.u64(self.deadline);
    }

    pub fn encoded_len(&self) -> usize {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.len()
    }
}

#[derive(Clone, Debug)]
pub struct SubmitJob {
    pub client_public_key: PublicKey,
    pub attestation_mode: AttestationMode,
    pub payload: Option<JobPayload>,
    pub platform_requirements: Vec<PlatformKind>,
    pub targets: Vec<KeyId>,
    /// Relative deadline in heights; `None` uses the configured default.
    pub deadline: Option<u64>,
}

/// A client's signed statement that it verified the assigned node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confirmation {
    pub job_id: JobId,
    pub report_digest: Digest,
    pub passed: bool,
    pub signature: Signature,
}

pub fn confirmation_payload(job_id: &JobId, report_digest: &Digest, passed: bool) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.fixed(b"confidant/confirm-attestation/v1")
        .bytes(job_id.as_bytes())
        .bytes(report_digest.as_bytes())
        .bool(passed);
    enc.finish()
}

/// A client's signed complaint that the assigned node failed attestation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailureEvidence {
    pub job_id: JobId,
    pub key_id: KeyId,
    pub reason: String,
    pub signature: Signature,
}

pub fn failure_payload(job_id: &JobId, key_id: &KeyId, reason: &str) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.fixed(b"confidant/attestation-failure/v1")
        .bytes(job_id.as_bytes())
        .bytes(key_id.as_bytes())
        .str(reason);
    enc.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyUpdate {
    pub delta: PolicyDelta,
    pub new_version: u64,
}

impl PolicyUpdate {
    pub fn signed_payload(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.fixed(b"confidant/policy-update/v1").u64(self.new_version);
        self.delta.encode(&mut enc);
        enc.finish()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("key {0:?} already has an active registration")]
    DuplicateRegistration(KeyId),
    #[error("key {0:?} was revoked and cannot be registered again")]
    RevokedKey(KeyId),
    #[error("unknown key {0:?}")]
    UnknownKey(KeyId),
    #[error("key {0:?} is already revoked")]
    AlreadyRevoked(KeyId),
    #[error("unknown job {0:?}")]
    UnknownJob(JobId),
    #[error("job carries no payload")]
    NoPayload,
    #[error("user-attested jobs send their input over the attested session, not the ledger")]
    PrematurePayload,
    #[error("invalid platform requirements: {0}")]
    InvalidRequirements(String),
    #[error("inline data of {size} bytes exceeds the {limit}-byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("operation requires a {expected:?} job")]
    WrongMode { expected: AttestationMode },
    #[error("job or record is in state {0}")]
    WrongState(String),
    #[error("signature rejected")]
    BadSignature,
    #[error("attestation was not confirmed for this user-attested job")]
    NotConfirmed,
    #[error("job is not held by this node")]
    NotAssignedToYou,
    #[error("job expired")]
    Expired,
    #[error("policy update not signed by the policy updater")]
    Unauthorized,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("committee agreement invalid: {0}")]
    InvalidAgreement(String),
}

#[derive(Clone, Debug)]
pub struct Ledger {
    config: LedgerConfig,
    height: u64,
    policy: PolicySet,
    policy_updater: PublicKey,
    roots: PlatformRoots,
    committee: CommitteeRoster,
    nodes: IndexMap<KeyId, NodeRecord>,
    jobs: IndexMap<JobId, JobRequest>,
    events: Vec<LedgerEvent>,
    job_counter: u64,
}

impl Ledger {
    pub fn new(config: LedgerConfig, genesis: Genesis) -> Self {
        Ledger {
            config,
            height: 0,
            policy: genesis.policy,
            policy_updater: genesis.policy_updater,
            roots: genesis.roots,
            committee: genesis.committee,
            nodes: IndexMap::new(),
            jobs: IndexMap::new(),
            events: Vec::new(),
            job_counter: 0,
        }
    }

    // ---- reads ----

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    pub fn roots(&self) -> &PlatformRoots {
        &self.roots
    }

    pub fn committee(&self) -> &CommitteeRoster {
        &self.committee
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn node(&self, key_id: &KeyId) -> Option<&NodeRecord> {
        self.nodes.get(key_id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRequest> {
        self.jobs.values()
    }

    pub fn job(&self, job_id: &JobId) -> Option<&JobRequest> {
        self.jobs.get(job_id)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Verified, unrevoked records of `platform`, in registration order.
    pub fn eligible_nodes(&self, platform: PlatformKind) -> Vec<&NodeRecord> {
        self.nodes
            .values()
            .filter(|r| r.platform == platform && r.is_assignable())
            .collect()
    }

    pub fn transcript_jsonl(&self) -> String {
        to_jsonl(&self.events)
    }

    pub fn write_transcript(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.transcript_jsonl())
    }

    // ---- internals ----

    fn emit(&mut self, body: EventBody) {
        self.events.push(LedgerEvent {
            height: self.height,
            kind: body.kind(),
            body: body.encode(),
        });
    }

    fn job_mut(&mut self, job_id: &JobId) -> Result<&mut JobRequest, LedgerError> {
        self.jobs.get_mut(job_id).ok_or(LedgerError::UnknownJob(*job_id))
    }

    fn check_inline(&self, payload: &JobPayload) -> Result<(), LedgerError> {
        let size = payload.ledger_size();
        if matches!(payload, JobPayload::Inline(_)) && size > self.config.inline_limit {
            return Err(LedgerError::PayloadTooLarge {
                size,
                limit: self.config.inline_limit,
            });
        }
        Ok(())
    }

    fn next_job_id(&mut self, client: &PublicKey) -> JobId {
        self.job_counter += 1;
        digest_parts(&[
            b"confidant/job",
            client.key_id().as_bytes(),
            &self.job_counter.to_le_bytes(),
        ])
    }

    fn submitted_event(job: &JobRequest) -> EventBody {
        EventBody::JobSubmitted {
            job_id: job.job_id,
            client_key: job.client_public_key,
            mode: job.attestation_mode,
            platforms: job.platform_requirements.clone(),
            targets: job.targets.clone(),
            excluded: job.excluded.iter().copied().collect(),
            payload: job.payload.clone(),
            deadline: job.deadline,
            requeued_from: job.requeued_from,
        }
    }

    /// Marks `job_id` Failed and queues a fresh Submitted copy. `culprit`,
    /// when given, is excluded from the copy's assignment.
    fn fail_and_requeue(&mut self, job_id: &JobId, culprit: Option<KeyId>, reason: &str) -> JobId {
        let (clone, key_id) = {
            let job = self.jobs.get_mut(job_id).expect("caller checked job exists");
            job.status = JobStatus::Failed;
            let mut clone = job.clone();
            if let Some(k) = culprit {
                clone.excluded.insert(k);
            }
            (clone, culprit.or(job.current_holder()).unwrap_or(Digest::ZERO))
        };
        self.emit(EventBody::JobFailed {
            job_id: *job_id,
            key_id,
            reason: reason.to_string(),
        });
        let mut clone = clone;
        clone.job_id = self.next_job_id(&clone.client_public_key);
        clone.status = JobStatus::Submitted;
        clone.assigned_node = None;
        clone.route.clear();
        clone.layer = 0;
        clone.result = None;
        clone.confirmed_report = None;
        clone.submitted_at = self.height;
        clone.deadline = self.height + self.config.default_deadline;
        clone.requeued_from = Some(*job_id);
        if clone.attestation_mode == AttestationMode::UserAttested {
            clone.payload = None;
        }
        let new_id = clone.job_id;
        self.emit(Self::submitted_event(&clone));
        self.jobs.insert(new_id, clone);
        new_id
    }

    fn fail_in_flight_on(&mut self, key_id: &KeyId, reason: &str) {
        let affected: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.is_in_flight() && j.route.contains(key_id))
            .map(|j| j.job_id)
            .collect();
        for id in affected {
            self.fail_and_requeue(&id, Some(*key_id), reason);
        }
    }

    // ---- node registry ----

    pub fn register_node(&mut self, reg: Registration) -> Result<NodeRecord, LedgerError> {
        let key_id = reg.public_key.key_id();
        if let Some(existing) = self.nodes.get(&key_id) {
            return Err(if existing.revoked {
                LedgerError::RevokedKey(key_id)
            } else {
                LedgerError::DuplicateRegistration(key_id)
            });
        }
        if self
            .nodes
            .values()
            .any(|r| r.node_id == reg.node_id && r.epoch == reg.epoch && !r.revoked)
        {
            return Err(LedgerError::DuplicateRegistration(key_id));
        }
        let (status, rejection, report_digest, report, direct) = match reg.evidence {
            Evidence::Direct(report) => {
                let (status, rejection) = match self.check_report(&report, &reg.public_key, reg.epoch) {
                    Ok(()) => (AttestationStatus::Verified, None),
                    Err(e) => (AttestationStatus::Rejected, Some(e)),
                };
                (
                    status,
                    rejection,
                    report.digest(),
                    ReportLocation::OnChain(report),
                    true,
                )
            }
            Evidence::Committee(r) => (
                AttestationStatus::Pending,
                None,
                r.content_digest,
                ReportLocation::Stored(r),
                false,
            ),
        };
        let record = NodeRecord {
            node_id: reg.node_id,
            platform: reg.platform,
            public_key: reg.public_key,
            key_id,
            attestation_status: status,
            epoch: reg.epoch,
            revoked: false,
            registered_at: self.height,
            report_digest,
            report,
            rejection: rejection.clone(),
        };
        self.emit(EventBody::NodeRegistered {
            node_id: record.node_id,
            key_id,
            public_key: record.public_key,
            platform: record.platform,
            epoch: record.epoch,
            status,
            reason: rejection.unwrap_or_default(),
            report_digest,
            direct,
        });
        self.nodes.insert(key_id, record.clone());
        Ok(record)
    }

    fn check_report(&self, report: &AttestationReport, pk: &PublicKey, epoch: u64) -> Result<(), String> {
        verify_report(
            report,
            pk,
            &self.policy,
            &self.roots,
            self.config.defenses.community_override,
        )
        .map_err(|e| match e {
            AttestationFailure::KeyBindingMismatch => "KeyBindingMismatch".to_string(),
            AttestationFailure::BadRootSignature(_) => "BadRootSignature".to_string(),
            AttestationFailure::Policy(r) => r.to_string(),
            other => other.to_string(),
        })?;
        if report.epoch != epoch {
            return Err(format!("StaleEpoch(report {}, claimed {epoch})", report.epoch));
        }
        Ok(())
    }

    pub fn submit_agreement(
        &mut self,
        key_id: &KeyId,
        agreement: &CommitteeAgreement,
    ) -> Result<NodeRecord, LedgerError> {
        let record = self.nodes.get(key_id).ok_or(LedgerError::UnknownKey(*key_id))?;
        if record.attestation_status != AttestationStatus::Pending || record.revoked {
            return Err(LedgerError::WrongState(format!("{:?}", record.attestation_status)));
        }
        if record.report_digest != agreement.report_digest {
            return Err(LedgerError::InvalidAgreement(
                "agreement covers a different report".into(),
            ));
        }
        let signers = valid_signers(
            &agreement.report_digest,
            agreement.verdict,
            &agreement.signatures,
            &self.committee,
        );
        let threshold = self.config.committee_threshold;
        if signers.len() < threshold {
            return Err(LedgerError::InvalidAgreement(format!(
                "{} valid signatures, threshold {threshold}",
                signers.len()
            )));
        }
        let status = match agreement.verdict {
            CommitteeVerdict::Accept => AttestationStatus::Verified,
            CommitteeVerdict::Reject => AttestationStatus::Rejected,
        };
        let record = self.nodes.get_mut(key_id).expect("checked above");
        record.attestation_status = status;
        if status == AttestationStatus::Rejected {
            record.rejection = Some("CommitteeReject".into());
        }
        let record = record.clone();
        self.emit(EventBody::CommitteeAgreement {
            key_id: *key_id,
            report_digest: agreement.report_digest,
            verdict: agreement.verdict,
            signers,
        });
        Ok(record)
    }

    /// Revokes `key_id`. In-flight jobs routed through it fail and are
    /// requeued.
    pub fn revoke_key(&mut self, key_id: &KeyId, reason: &str) -> Result<NodeRecord, LedgerError> {
        let record = self.nodes.get_mut(key_id).ok_or(LedgerError::UnknownKey(*key_id))?;
        if record.revoked {
            return Err(LedgerError::AlreadyRevoked(*key_id));
        }
        record.revoked = true;
        let record = record.clone();
        self.emit(EventBody::KeyRevoked {
            key_id: *key_id,
            reason: reason.to_string(),
        });
        self.fail_in_flight_on(key_id, "KeyRevoked");
        Ok(record)
    }

    pub fn update_policy(&mut self, update: &PolicyUpdate, signature: &Signature) -> Result<&PolicySet, LedgerError> {
        crypto::verify(signature, &self.policy_updater, &update.signed_payload())
            .map_err(|_| LedgerError::Unauthorized)?;
        let next = self.policy.apply_update(&update.delta, update.new_version)?;
        self.policy = next;
        let mut enc = Encoder::new();
        update.delta.encode(&mut enc);
        self.emit(EventBody::PolicyUpdated {
            version: update.new_version,
            delta: enc.finish(),
        });
        Ok(&self.policy)
    }

    /// Re-checks every Verified record against the current policy. Records
    /// that no longer pass become Rejected; their in-flight jobs are failed
    /// and requeued. Returns the newly rejected keys.
    pub fn reevaluate_nodes(&mut self, storage: &ContentStore) -> Vec<KeyId> {
        let candidates: Vec<KeyId> = self
            .nodes
            .values()
            .filter(|r| r.is_assignable())
            .map(|r| r.key_id)
            .collect();
        let mut rejected = Vec::new();
        for key_id in candidates {
            let record = &self.nodes[&key_id];
            let report = match &record.report {
                ReportLocation::OnChain(r) => Ok(r.clone()),
                ReportLocation::Stored(r) => storage
                    .get(r)
                    .map_err(|e| e.to_string())
                    .and_then(|b| AttestationReport::from_bytes(&b).map_err(|e| e.to_string())),
            };
            let verdict = report.and_then(|r| {
                match self
                    .policy
                    .evaluate_with(&r.measurements, self.config.defenses.community_override)
                {
                    Ok(crate::policy::PolicyVerdict::Accept) => Ok(()),
                    Ok(crate::policy::PolicyVerdict::Reject(reason)) => Err(reason.to_string()),
                    Err(e) => Err(e.to_string()),
                }
            });
            if let Err(reason) = verdict {
                let record = self.nodes.get_mut(&key_id).expect("listed above");
                record.attestation_status = AttestationStatus::Rejected;
                record.rejection = Some(reason.clone());
                self.emit(EventBody::NodeStatusChanged {
                    key_id,
                    status: AttestationStatus::Rejected,
                    reason,
                });
                self.fail_in_flight_on(&key_id, "NodeRejected");
                rejected.push(key_id);
            }
        }
        rejected
    }

    // ---- jobs ----

    pub fn submit_job(&mut self, req: SubmitJob) -> Result<JobRequest, LedgerError> {
        if req.platform_requirements.is_empty() {
            return Err(LedgerError::InvalidRequirements("no platform listed".into()));
        }
        match req.attestation_mode {
            AttestationMode::OnChainAttested if req.payload.is_none() => return Err(LedgerError::NoPayload),
            AttestationMode::UserAttested if req.payload.is_some() => return Err(LedgerError::PrematurePayload),
            AttestationMode::UserAttested if req.platform_requirements.len() != 1 => {
                return Err(LedgerError::InvalidRequirements(
                    "user-attested jobs name exactly one platform".into(),
                ))
            }
            _ => {}
        }
        if !req.targets.is_empty() && req.targets.len() != req.platform_requirements.len() {
            return Err(LedgerError::InvalidRequirements(format!(
                "{} targets for {} layers",
                req.targets.len(),
                req.platform_requirements.len()
            )));
        }
        if let Some(p) = &req.payload {
            self.check_inline(p)?;
        }
        let job_id = self.next_job_id(&req.client_public_key);
        let job = JobRequest {
            job_id,
            client_public_key: req.client_public_key,
            attestation_mode: req.attestation_mode,
            payload: req.payload,
            platform_requirements: req.platform_requirements,
            targets: req.targets,
            excluded: BTreeSet::new(),
            assigned_node: None,
            route: Vec::new(),
            layer: 0,
            status: JobStatus::Submitted,
            result: None,
            confirmed_report: None,
            deadline: self.height + req.deadline.unwrap_or(self.config.default_deadline),
            submitted_at: self.height,
            requeued_from: None,
        };
        self.emit(Self::submitted_event(&job));
        self.jobs.insert(job_id, job.clone());
        Ok(job)
    }

    /// Assigns every Submitted job that has an eligible node for each layer,
    /// drawing uniformly per layer with a generator seeded by `rng_seed`.
    pub fn assign_jobs(&mut self, rng_seed: &[u8; 32]) -> Vec<(JobId, NodeId)> {
        let mut rng = ChaCha20Rng::from_seed(*rng_seed);
        let pending: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Submitted)
            .map(|j| j.job_id)
            .collect();
        let mut out = Vec::new();
        for job_id in pending {
            let job = &self.jobs[&job_id];
            let candidates: Vec<Vec<(KeyId, NodeId)>> = job
                .platform_requirements
                .iter()
                .enumerate()
                .map(|(layer, platform)| {
                    self.nodes
                        .values()
                        .filter(|r| {
                            r.platform == *platform
                                && r.is_assignable()
                                && !job.excluded.contains(&r.key_id)
                                && job.targets.get(layer).is_none_or(|t| *t == r.key_id)
                        })
                        .map(|r| (r.key_id, r.node_id))
                        .collect()
                })
                .collect();
            if candidates.iter().any(Vec::is_empty) {
                continue;
            }
            let route: Vec<RouteHop> = candidates
                .iter()
                .map(|c| {
                    let (key_id, node_id) = c[rng.gen_range(0..c.len())];
                    RouteHop { key_id, node_id }
                })
                .collect();
            let job = self.jobs.get_mut(&job_id).expect("listed above");
            job.status = JobStatus::Assigned;
            job.route = route.iter().map(|h| h.key_id).collect();
            job.layer = 0;
            job.assigned_node = Some(route[0].node_id);
            out.push((job_id, route[0].node_id));
            self.emit(EventBody::JobAssigned { job_id, route });
        }
        out
    }

    pub fn confirm_attestation(
        &mut self,
        job_id: &JobId,
        confirmation: &Confirmation,
    ) -> Result<JobRequest, LedgerError> {
        let job = self.jobs.get(job_id).ok_or(LedgerError::UnknownJob(*job_id))?;
        if job.attestation_mode != AttestationMode::UserAttested {
            return Err(LedgerError::WrongMode {
                expected: AttestationMode::UserAttested,
            });
        }
        let payload = confirmation_payload(job_id, &confirmation.report_digest, confirmation.passed);
        if confirmation.job_id != *job_id
            || !confirmation.passed
            || crypto::verify(&confirmation.signature, &job.client_public_key, &payload).is_err()
        {
            return Err(LedgerError::BadSignature);
        }
        if job.status != JobStatus::Assigned {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        let job = self.job_mut(job_id)?;
        job.status = JobStatus::AttestationConfirmed;
        job.confirmed_report = Some(confirmation.report_digest);
        let job = job.clone();
        self.emit(EventBody::AttestationConfirmed {
            job_id: *job_id,
            report_digest: confirmation.report_digest,
        });
        Ok(job)
    }

    fn check_holder(&self, job: &JobRequest, key_id: &KeyId) -> Result<(), LedgerError> {
        if job.status == JobStatus::Expired {
            return Err(LedgerError::Expired);
        }
        if job.current_holder() != Some(*key_id) {
            return Err(LedgerError::NotAssignedToYou);
        }
        Ok(())
    }

    fn gate_blocks(&self, job: &JobRequest) -> bool {
        self.config.defenses.confirmation_gate
            && job.attestation_mode == AttestationMode::UserAttested
            && job.status == JobStatus::Assigned
    }

    /// The holder of layer 0 announces it is starting work.
    pub fn start_execution(&mut self, job_id: &JobId, key_id: &KeyId) -> Result<JobRequest, LedgerError> {
        let job = self.jobs.get(job_id).ok_or(LedgerError::UnknownJob(*job_id))?;
        self.check_holder(job, key_id)?;
        if self.gate_blocks(job) {
            return Err(LedgerError::NotConfirmed);
        }
        if !matches!(job.status, JobStatus::Assigned | JobStatus::AttestationConfirmed) || job.layer != 0 {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        let job = self.job_mut(job_id)?;
        job.status = JobStatus::Executing;
        let job = job.clone();
        self.emit(EventBody::JobExecuting {
            job_id: *job_id,
            key_id: *key_id,
        });
        Ok(job)
    }

    /// Hands the next inner layer to the following node on the route.
    pub fn forward_layer(
        &mut self,
        job_id: &JobId,
        key_id: &KeyId,
        inner: JobPayload,
    ) -> Result<JobRequest, LedgerError> {
        let job = self.jobs.get(job_id).ok_or(LedgerError::UnknownJob(*job_id))?;
        self.check_holder(job, key_id)?;
        if job.status != JobStatus::Executing || job.is_final_layer() {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        self.check_inline(&inner)?;
        let job = self.job_mut(job_id)?;
        job.layer += 1;
        job.payload = Some(inner.clone());
        let layer = job.layer as u32;
        let job = job.clone();
        self.emit(EventBody::LayerForwarded {
            job_id: *job_id,
            key_id: *key_id,
            layer,
            payload: inner,
        });
        Ok(job)
    }

    pub fn post_result(
        &mut self,
        job_id: &JobId,
        key_id: &KeyId,
        result: JobPayload,
    ) -> Result<JobRequest, LedgerError> {
        let job = self.jobs.get(job_id).ok_or(LedgerError::UnknownJob(*job_id))?;
        self.check_holder(job, key_id)?;
        if self.gate_blocks(job) {
            return Err(LedgerError::NotConfirmed);
        }
        let direct_ok = job.status == JobStatus::Assigned
            && (job.attestation_mode == AttestationMode::OnChainAttested || !self.config.defenses.confirmation_gate)
            && job.route.len() == 1;
        if !(job.status == JobStatus::Executing || direct_ok) || !job.is_final_layer() {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        self.check_inline(&result)?;
        let job = self.job_mut(job_id)?;
        job.status = JobStatus::Completed;
        job.result = Some(result.clone());
        let job = job.clone();
        self.emit(EventBody::JobCompleted {
            job_id: *job_id,
            key_id: *key_id,
            result,
        });
        Ok(job)
    }

    /// A holder reports it could not process the job (bad ciphertext,
    /// missing storage object). The job fails and a copy excluding the
    /// reporting node is queued.
    pub fn report_failure(&mut self, job_id: &JobId, key_id: &KeyId, reason: &str) -> Result<JobId, LedgerError> {
        let job = self.jobs.get(job_id).ok_or(LedgerError::UnknownJob(*job_id))?;
        self.check_holder(job, key_id)?;
        if !job.is_in_flight() {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        Ok(self.fail_and_requeue(job_id, Some(*key_id), reason))
    }

    /// The client reports a failed handshake with the assigned node; the
    /// job returns to Submitted with that node excluded.
    pub fn switch_node(&mut self, evidence: &FailureEvidence) -> Result<JobRequest, LedgerError> {
        let job_id = evidence.job_id;
        let job = self.jobs.get(&job_id).ok_or(LedgerError::UnknownJob(job_id))?;
        if job.status != JobStatus::Assigned || job.route.first() != Some(&evidence.key_id) {
            return Err(LedgerError::WrongState(job.status.to_string()));
        }
        let payload = failure_payload(&job_id, &evidence.key_id, &evidence.reason);
        crypto::verify(&evidence.signature, &job.client_public_key, &payload).map_err(|_| LedgerError::BadSignature)?;
        let job = self.job_mut(&job_id)?;
        job.status = JobStatus::Submitted;
        job.excluded.insert(evidence.key_id);
        job.route.clear();
        job.layer = 0;
        job.assigned_node = None;
        let job = job.clone();
        self.emit(EventBody::NodeExcluded {
            job_id,
            key_id: evidence.key_id,
            evidence: crypto::digest(&payload),
        });
        Ok(job)
    }

    /// Closes the current height and expires assigned jobs whose deadline
    /// has passed.
    pub fn seal_height(&mut self) -> u64 {
        self.emit(EventBody::HeightSealed { height: self.height });
        self.height += 1;
        let expired: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| {
                matches!(j.status, JobStatus::Assigned | JobStatus::AttestationConfirmed) && self.height > j.deadline
            })
            .map(|j| j.job_id)
            .collect();
        for job_id in expired {
            self.jobs.get_mut(&job_id).expect("listed").status = JobStatus::Expired;
            self.emit(EventBody::JobExpired { job_id });
        }
        self.height
    }

    // ---- adversary hooks ----

    /// Simulates a compromised contract overwriting a record's status
    /// without emitting an event.
    pub fn adversary_set_status(&mut self, key_id: &KeyId, status: AttestationStatus) -> bool {
        match self.nodes.get_mut(key_id) {
            Some(r) => {
                r.attestation_status = status;
                true
            }
            None => false,
        }
    }

    /// Simulates a compromised contract swapping a record's stored report.
    pub fn adversary_replace_report(&mut self, key_id: &KeyId, report: AttestationReport) -> bool {
        match self.nodes.get_mut(key_id) {
            Some(r) => {
                r.report = ReportLocation::OnChain(report);
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests;
