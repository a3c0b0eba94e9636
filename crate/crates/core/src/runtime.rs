// SPDX-License-Identifier: Apache-2.0

//! The execution-node loop: poll the ledger, wait for confirmation on
//! user-attested jobs, decrypt inside the enclave, run the workload, seal
//! the result to the client, and rotate keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::atls::{EnclaveEndpoint, Frame, HandshakeServer};
use crate::client::{place, resolve_payload, ClientError};
use crate::crypto::{self, digest_parts, JobId, KeyId, SealedEnvelope};
use crate::ledger::{AttestationMode, Evidence, JobRequest, JobStatus, Ledger, LedgerError, NodeRecord, Registration};
use crate::storage::ContentStore;
use crate::tee::TeeInstance;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationPath {
    #[default]
    Direct,
    Committee,
}

/// Misbehavior a node may attempt. The ledger and clients must catch it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Malice {
    /// Try to start user-attested jobs before the client confirms.
    pub execute_unconfirmed: bool,
    /// Post an output that is not the workload's.
    pub forge_result: bool,
    /// Seal the result to a key other than the client's.
    pub misroute_result: bool,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Outcome {
    Completed,
    Forwarded { layer: usize },
    AwaitingConfirmation,
    AwaitingInput,
    DecryptFailed(String),
    StorageMissing(String),
    LedgerRejected(LedgerError),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct JobOutcome {
    pub job_id: JobId,
    pub outcome: Outcome,
}

pub struct NodeRuntime {
    name: String,
    endpoint: EnclaveEndpoint,
    path: RegistrationPath,
    malice: Malice,
    inbox: BTreeMap<JobId, Frame>,
    seed: [u8; 32],
    rotations: u64,
    /// Opens or workload runs on a user-attested job the ledger had not
    /// confirmed. An honest node with the gate on keeps this at zero.
    gate_violations: u64,
    executions: u64,
}

impl NodeRuntime {
    pub fn new(name: impl Into<String>, instance: TeeInstance, path: RegistrationPath, seed: &[u8; 32]) -> Self {
        NodeRuntime {
            name: name.into(),
            endpoint: EnclaveEndpoint::new(instance),
            path,
            malice: Malice::default(),
            inbox: BTreeMap::new(),
            seed: *seed,
            rotations: 0,
            gate_violations: 0,
            executions: 0,
        }
    }

    pub fn with_malice(mut self, malice: Malice) -> Self {
        self.malice = malice;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instance(&self) -> &TeeInstance {
        self.endpoint.instance()
    }

    pub fn key_id(&self) -> KeyId {
        self.instance().key_id()
    }

    pub fn registration_path(&self) -> RegistrationPath {
        self.path
    }

    pub fn gate_violations(&self) -> u64 {
        self.gate_violations
    }

    pub fn executions(&self) -> u64 {
        self.executions
    }

    pub fn rotations(&self) -> u64 {
        self.rotations
    }

    pub fn endpoint(&mut self) -> &mut EnclaveEndpoint {
        &mut self.endpoint
    }

    /// Handshake server for clients, pinned to the current ledger height.
    pub fn server(&mut self, height: u64) -> &mut dyn HandshakeServer {
        self.endpoint.set_height(height);
        &mut self.endpoint
    }

    /// Accepts a sealed input frame for a user-attested job. It stays
    /// encrypted until the job may run.
    pub fn deliver(&mut self, job_id: JobId, frame: Frame) {
        self.inbox.insert(job_id, frame);
    }

    /// Attests and registers the current instance.
    pub fn register(&mut self, ledger: &mut Ledger, storage: &ContentStore) -> Result<NodeRecord, LedgerError> {
        let inst = self.instance();
        let nonce = digest_parts(&[
            b"confidant/registration-nonce",
            inst.key_id().as_bytes(),
            &ledger.height().to_le_bytes(),
        ])
        .0;
        let report = inst.attest(&nonce);
        let evidence = match self.path {
            RegistrationPath::Direct => Evidence::Direct(report),
            RegistrationPath::Committee => Evidence::Committee(
                storage
                    .put(&report.to_bytes())
                    .map_err(|e| LedgerError::WrongState(format!("storage: {e}")))?,
            ),
        };
        ledger.register_node(Registration {
            node_id: inst.instance_id(),
            platform: inst.platform(),
            public_key: *inst.public_key(),
            epoch: inst.epoch(),
            evidence,
        })
    }

    /// Resets the enclave to a fresh key, revokes the old key and registers
    /// the new one at the next epoch.
    pub fn rotate_and_reregister(
        &mut self,
        ledger: &mut Ledger,
        storage: &ContentStore,
        seed: &[u8; 32],
    ) -> Result<NodeRecord, LedgerError> {
        let old = self.key_id();
        let next = self.instance().rotate(seed);
        ledger.revoke_key(&old, "rotation")?;
        self.endpoint = EnclaveEndpoint::new(next);
        self.inbox.clear();
        self.rotations += 1;
        self.register(ledger, storage)
    }

    fn job_seed(&self, job_id: &JobId, label: &[u8]) -> [u8; 32] {
        digest_parts(&[label, &self.seed, job_id.as_bytes(), self.key_id().as_bytes()]).0
    }

    fn fail(&self, ledger: &mut Ledger, job_id: &JobId, outcome: Outcome, reason: &str) -> Outcome {
        match ledger.report_failure(job_id, &self.key_id(), reason) {
            Ok(_) => outcome,
            Err(e) => Outcome::LedgerRejected(e),
        }
    }

    fn note_compute(&mut self, ledger: &Ledger, job: &JobRequest) {
        let unconfirmed = ledger
            .job(&job.job_id)
            .is_some_and(|j| j.attestation_mode == AttestationMode::UserAttested && j.confirmed_report.is_none());
        if unconfirmed {
            self.gate_violations += 1;
        }
    }

    /// One polling pass: handles up to `max_jobs` jobs currently held by
    /// this node, in ledger order.
    pub fn poll_and_execute(
        &mut self,
        ledger: &mut Ledger,
        storage: &ContentStore,
        max_jobs: usize,
    ) -> Vec<JobOutcome> {
        self.endpoint.set_height(ledger.height());
        let me = self.key_id();
        let held: Vec<JobRequest> = ledger
            .jobs()
            .filter(|j| j.current_holder() == Some(me) && j.is_in_flight())
            .take(max_jobs)
            .cloned()
            .collect();
        held.into_iter()
            .map(|job| JobOutcome {
                job_id: job.job_id,
                outcome: self.handle(ledger, storage, job),
            })
            .collect()
    }

    fn handle(&mut self, ledger: &mut Ledger, storage: &ContentStore, job: JobRequest) -> Outcome {
        let me = self.key_id();
        let gate = ledger.config().defenses.confirmation_gate;
        let user = job.attestation_mode == AttestationMode::UserAttested;
        if user && job.status == JobStatus::Assigned && gate && !self.malice.execute_unconfirmed {
            return Outcome::AwaitingConfirmation;
        }
        if user && !self.inbox.contains_key(&job.job_id) {
            return Outcome::AwaitingInput;
        }
        if matches!(job.status, JobStatus::Assigned | JobStatus::AttestationConfirmed) {
            if let Err(e) = ledger.start_execution(&job.job_id, &me) {
                return Outcome::LedgerRejected(e);
            }
        }

        let input = if user {
            let frame = self.inbox.remove(&job.job_id).expect("checked above");
            self.note_compute(ledger, &job);
            let opened = match &frame {
                Frame::AppData { session_id, .. } => match self.endpoint.session_mut(session_id) {
                    Some(s) => s.open(&frame).map_err(|e| e.to_string()),
                    None => Err("no session for input".to_string()),
                },
                other => Err(format!("unexpected {}", other.tag())),
            };
            match opened {
                Ok(p) if p.len() >= 32 && p[..32] == job.job_id.as_bytes()[..] => p[32..].to_vec(),
                Ok(_) => {
                    return self.fail(
                        ledger,
                        &job.job_id,
                        Outcome::DecryptFailed("input bound to another job".into()),
                        "DecryptFailed",
                    )
                }
                Err(e) => return self.fail(ledger, &job.job_id, Outcome::DecryptFailed(e), "DecryptFailed"),
            }
        } else {
            let Some(payload) = &job.payload else {
                return self.fail(
                    ledger,
                    &job.job_id,
                    Outcome::StorageMissing("no payload".into()),
                    "NoPayload",
                );
            };
            let envelope = match resolve_payload(payload, storage) {
                Ok(env) => env,
                Err(e) => {
                    let reason = match e {
                        ClientError::IntegrityMismatch(_) => "IntegrityMismatch",
                        _ => "StorageMissing",
                    };
                    return self.fail(ledger, &job.job_id, Outcome::StorageMissing(e.to_string()), reason);
                }
            };
            self.note_compute(ledger, &job);
            match self.instance().open(&envelope) {
                Ok(p) => p,
                Err(e) => {
                    return self.fail(
                        ledger,
                        &job.job_id,
                        Outcome::DecryptFailed(e.to_string()),
                        "DecryptFailed",
                    )
                }
            }
        };

        let limit = ledger.config().inline_limit;
        if !job.is_final_layer() {
            let inner = match SealedEnvelope::from_bytes(&input) {
                Ok(env) => env,
                Err(e) => {
                    return self.fail(
                        ledger,
                        &job.job_id,
                        Outcome::DecryptFailed(e.to_string()),
                        "DecryptFailed",
                    )
                }
            };
            let payload = match place(inner, limit, storage) {
                Ok(p) => p,
                Err(e) => return Outcome::StorageMissing(e.to_string()),
            };
            return match ledger.forward_layer(&job.job_id, &me, payload) {
                Ok(j) => Outcome::Forwarded { layer: j.layer },
                Err(e) => Outcome::LedgerRejected(e),
            };
        }

        self.executions += 1;
        let mut output = self.instance().execute_workload(&input);
        if self.malice.forge_result {
            output = crypto::digest_parts(&[b"forged", &output]).0.to_vec();
        }
        let recipient = if self.malice.misroute_result {
            *self.instance().public_key()
        } else {
            job.client_public_key
        };
        let sealed = crypto::seal(
            &output,
            &recipient,
            &self.job_seed(&job.job_id, b"confidant/result-seal"),
        );
        let payload = match place(sealed, limit, storage) {
            Ok(p) => p,
            Err(e) => return Outcome::StorageMissing(e.to_string()),
        };
        match ledger.post_result(&job.job_id, &me, payload) {
            Ok(_) => Outcome::Completed,
            Err(e) => Outcome::LedgerRejected(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atls::SessionTranscript;
    use crate::client::Client;
    use crate::committee::CommitteeRoster;
    use crate::crypto::{digest, generate_keypair};
    use crate::ledger::{EventKind, JobPayload};
    use crate::ledger::{Genesis, LedgerConfig};
    use crate::policy::{Measurement, MeasurementClass, PolicySet};
    use crate::tee::{execute_workload, PlatformKind, PlatformRoots, TeePlatform};
    use crate::Defenses;

    fn setup(defenses: Defenses) -> (Ledger, ContentStore, NodeRuntime, NodeRuntime) {
        let image = digest(b"image");
        let platform = TeePlatform::new(PlatformKind::SimTdx, &[1; 32]);
        let vendor = platform
            .vendor_measurements()
            .into_iter()
            .map(|(c, d)| Measurement::new(c, d, ""));
        let policy =
            PolicySet::from_parts(1, vendor, [Measurement::new(MeasurementClass::VmImage, image, "")], []).unwrap();
        let mut ledger = Ledger::new(
            LedgerConfig {
                defenses,
                ..LedgerConfig::default()
            },
            Genesis {
                policy,
                policy_updater: *generate_keypair(&[0; 32]).public_key(),
                roots: PlatformRoots::from_platforms([&platform]),
                committee: CommitteeRoster::new([]),
            },
        );
        let storage = ContentStore::in_memory();
        let mut a = NodeRuntime::new(
            "a",
            TeeInstance::spawn(&platform, image, &[2; 32]),
            RegistrationPath::Direct,
            &[2; 32],
        );
        let mut b = NodeRuntime::new(
            "b",
            TeeInstance::spawn(&platform, image, &[3; 32]),
            RegistrationPath::Direct,
            &[3; 32],
        );
        a.register(&mut ledger, &storage).unwrap();
        b.register(&mut ledger, &storage).unwrap();
        (ledger, storage, a, b)
    }

    fn holder<'a>(ledger: &Ledger, job: &JobId, a: &'a mut NodeRuntime, b: &'a mut NodeRuntime) -> &'a mut NodeRuntime {
        if ledger.job(job).unwrap().current_holder() == Some(a.key_id()) {
            a
        } else {
            b
        }
    }

    #[test]
    fn onchain_round_trip() {
        let (mut ledger, storage, mut a, mut b) = setup(Defenses::default());
        let mut client = Client::new(&[9; 32], 50, Defenses::default());
        let job = client
            .submit_onchain(&mut ledger, &storage, b"what is 2+2", &[PlatformKind::SimTdx])
            .unwrap();
        ledger.assign_jobs(&[0; 32]);
        let node = holder(&ledger, &job.job_id, &mut a, &mut b);
        let out = node.poll_and_execute(&mut ledger, &storage, 10);
        assert_eq!(out[0].outcome, Outcome::Completed);
        let done = ledger.job(&job.job_id).unwrap();
        assert_eq!(
            client.open_result(done, &storage).unwrap(),
            execute_workload(b"what is 2+2")
        );
    }

    #[test]
    fn user_attested_waits_for_confirmation() {
        let (mut ledger, storage, mut a, mut b) = setup(Defenses::default());
        let mut client = Client::new(&[9; 32], 50, Defenses::default());
        let job = client.submit_user_attested(&mut ledger, PlatformKind::SimTdx).unwrap();
        ledger.assign_jobs(&[0; 32]);
        let node = holder(&ledger, &job.job_id, &mut a, &mut b);
        assert_eq!(
            node.poll_and_execute(&mut ledger, &storage, 10)[0].outcome,
            Outcome::AwaitingConfirmation
        );
        assert!(ledger.events().iter().all(|e| e.kind != EventKind::JobExecuting));

        let mut t = SessionTranscript::default();
        let height = ledger.height();
        let (_, frame) = client
            .attest_and_send(&mut ledger, &job.job_id, node.server(height), b"private", true, &mut t)
            .unwrap();
        assert!(!t.data_before_verify());
        node.deliver(job.job_id, frame);
        assert_eq!(
            node.poll_and_execute(&mut ledger, &storage, 10)[0].outcome,
            Outcome::Completed
        );
        assert_eq!(node.gate_violations(), 0);
        let done = ledger.job(&job.job_id).unwrap();
        assert_eq!(
            client.open_result(done, &storage).unwrap(),
            execute_workload(b"private")
        );
    }

    #[test]
    fn eager_node_blocked_by_ledger() {
        let (mut ledger, storage, a, b) = setup(Defenses::default());
        let mut a = a.with_malice(Malice {
            execute_unconfirmed: true,
            ..Malice::default()
        });
        let mut b = b.with_malice(Malice {
            execute_unconfirmed: true,
            ..Malice::default()
        });
        let mut client = Client::new(&[9; 32], 50, Defenses::default());
        let job = client.submit_user_attested(&mut ledger, PlatformKind::SimTdx).unwrap();
        ledger.assign_jobs(&[0; 32]);
        let node = holder(&ledger, &job.job_id, &mut a, &mut b);
        node.deliver(job.job_id, Frame::Alert { reason: "junk".into() });
        let out = node.poll_and_execute(&mut ledger, &storage, 10);
        assert_eq!(out[0].outcome, Outcome::LedgerRejected(LedgerError::NotConfirmed));
        assert_eq!(node.gate_violations(), 0);
    }

    #[test]
    fn misrouted_payload_fails_and_requeues() {
        let (mut ledger, storage, mut a, b) = setup(Defenses::default());
        let client = Client::new(&[9; 32], 50, Defenses::default());
        let env = crypto::seal(b"x", b.instance().public_key(), &[1; 32]);
        let job = ledger
            .submit_job(crate::ledger::SubmitJob {
                client_public_key: *client.public_key(),
                attestation_mode: AttestationMode::OnChainAttested,
                payload: Some(JobPayload::Inline(env)),
                platform_requirements: vec![PlatformKind::SimTdx],
                targets: vec![a.key_id()],
                deadline: None,
            })
            .unwrap();
        ledger.assign_jobs(&[0; 32]);
        let out = a.poll_and_execute(&mut ledger, &storage, 10);
        assert!(matches!(out[0].outcome, Outcome::DecryptFailed(_)));
        assert_eq!(ledger.job(&job.job_id).unwrap().status, JobStatus::Failed);
        let requeued = ledger.jobs().find(|j| j.requeued_from == Some(job.job_id)).unwrap();
        assert_eq!(requeued.status, JobStatus::Submitted);
        assert!(requeued.excluded.contains(&a.key_id()));
    }

    #[test]
    fn rotation_revokes_and_bumps_epoch() {
        let (mut ledger, storage, mut a, _b) = setup(Defenses::default());
        let old = a.key_id();
        let old_pk = *a.instance().public_key();
        let rec = a.rotate_and_reregister(&mut ledger, &storage, &[2; 32]).unwrap();
        assert_eq!(rec.epoch, 1);
        assert_ne!(rec.key_id, old);
        assert!(ledger.node(&old).unwrap().revoked);
        let rec2 = a.rotate_and_reregister(&mut ledger, &storage, &[2; 32]).unwrap();
        assert_eq!(rec2.epoch, 2);
        let old_env = crypto::seal(b"before", &old_pk, &[1; 32]);
        assert!(a.instance().open(&old_env).is_err());
    }
}
