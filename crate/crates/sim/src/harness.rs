// SPDX-License-Identifier: Apache-2.0

//! The simulation world and its tick loop.
//!
//! One tick runs every actor once, in a fixed order, then seals a ledger
//! height:
//!
//! 1. nodes whose `register_at` or `rotate_at` equals the height register
//! 2. the committee votes on every Pending record
//! 3. clients, in config order: follow requeues, handshake, collect
//!    results, submit
//! 4. the scheduler assigns open jobs with a height-derived seed
//! 5. nodes, in config order, poll and execute
//!
//! Every random choice is derived from the run seed, so a (config, seed)
//! pair fixes the transcript byte for byte.

use std::collections::BTreeSet;

use confidant_core::atls::{Frame, HandshakeServer, SessionTranscript};
use confidant_core::client::{Client, ClientError};
use confidant_core::committee::{verify_pending, CommitteeMember, CommitteeRoster, CommitteeVerdict};
use confidant_core::crypto::{digest, digest_parts, generate_keypair, JobId, KeyId, KeyPair};
use confidant_core::ledger::{
    AttestationStatus, EventKind, Genesis, JobStatus, Ledger, LedgerConfig, LedgerError, NodeRecord,
};
use confidant_core::policy::{Measurement, MeasurementClass, PolicySet};
use confidant_core::runtime::{JobOutcome, NodeRuntime};
use confidant_core::storage::ContentStore;
use confidant_core::tee::{execute_workload, PlatformKind, PlatformRoots, TeeInstance, TeePlatform};

use crate::config::{ClientMode, ClientSpec, NodeSpec, SimConfig, APPROVED_IMAGE};
use crate::SimError;

/// Seed for a named purpose within one run.
pub fn derive(seed: &[u8; 32], label: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut all: Vec<&[u8]> = vec![b"confidant/sim", label.as_bytes(), seed];
    all.extend_from_slice(parts);
    digest_parts(&all).0
}

/// Short name of an enum variant from its Debug output.
pub fn variant(debug: &str) -> &str {
    let end = debug
        .find(|c: char| !c.is_alphanumeric() && c != '_')
        .unwrap_or(debug.len());
    &debug[..end]
}

pub fn client_error_kind(e: &ClientError) -> String {
    match e {
        ClientError::Handshake(inner) => format!("Handshake/{}", variant(&format!("{inner:?}"))),
        ClientError::Ledger(inner) => format!("Ledger/{}", variant(&format!("{inner:?}"))),
        other => variant(&format!("{other:?}")).to_string(),
    }
}

pub struct NodeActor {
    pub spec: NodeSpec,
    pub runtime: NodeRuntime,
    /// Latest registration attempt.
    pub registration: Option<Result<NodeRecord, LedgerError>>,
    /// Every key this node has registered, oldest first.
    pub keys: Vec<KeyId>,
    pub outcomes: Vec<(u64, JobOutcome)>,
    captured: Option<Frame>,
    pub replays: u64,
}

impl NodeActor {
    pub fn key_id(&self) -> KeyId {
        self.runtime.key_id()
    }

    pub fn is_registered(&self) -> bool {
        matches!(self.registration, Some(Ok(_)))
    }
}

/// A network attacker that replays the first ServerKey frame it saw.
struct Replayer<'a> {
    inner: &'a mut dyn HandshakeServer,
    captured: &'a mut Option<Frame>,
    replays: &'a mut u64,
}

impl HandshakeServer for Replayer<'_> {
    fn respond(&mut self, frame: &Frame) -> Frame {
        let reply = self.inner.respond(frame);
        if matches!(frame, Frame::ClientHello { .. }) {
            match self.captured {
                Some(old) => {
                    *self.replays += 1;
                    return old.clone();
                }
                None => *self.captured = Some(reply.clone()),
            }
        }
        reply
    }
}

#[derive(Clone, Debug)]
pub struct TrackedJob {
    /// Every job id this submission has had; requeues append.
    pub chain: Vec<JobId>,
    pub input: Vec<u8>,
    pub expected: Vec<u8>,
    /// (job id, node key) pairs already handshaken; a switched job keeps
    /// its id but gets a new holder.
    handshaken: BTreeSet<(JobId, KeyId)>,
    pub result: Option<Result<Vec<u8>, String>>,
}

impl TrackedJob {
    pub fn current(&self) -> JobId {
        *self.chain.last().expect("chain starts non-empty")
    }

    pub fn succeeded(&self) -> bool {
        matches!(&self.result, Some(Ok(out)) if *out == self.expected)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientFailure {
    pub height: u64,
    pub kind: String,
    pub detail: String,
}

pub struct ClientActor {
    pub spec: ClientSpec,
    pub client: Client,
    seed: [u8; 32],
    pub jobs: Vec<TrackedJob>,
    pub failures: Vec<ClientFailure>,
}

#[derive(Clone, Debug)]
pub struct SessionLog {
    pub height: u64,
    pub client: String,
    pub node: String,
    pub job: JobId,
    pub frames: Vec<Frame>,
    pub verified: bool,
    pub app_data_before_verify: bool,
    pub established: bool,
}

impl ClientActor {
    fn input(&self, n: usize) -> Vec<u8> {
        let mut out = format!("secret:{}:{n}:", self.spec.name).into_bytes();
        let mut block = derive(&self.seed, "input", &[&(n as u64).to_le_bytes()]);
        let target = self.spec.input_size.max(out.len() + 32);
        while out.len() < target {
            out.extend_from_slice(&block);
            block = digest(&block).0;
        }
        out.truncate(target);
        out
    }

    fn fail(&mut self, height: u64, e: &ClientError) {
        self.failures.push(ClientFailure {
            height,
            kind: client_error_kind(e),
            detail: e.to_string(),
        });
    }

    fn step(
        &mut self,
        ledger: &mut Ledger,
        storage: &ContentStore,
        nodes: &mut [NodeActor],
        sessions: &mut Vec<SessionLog>,
    ) {
        let height = ledger.height();
        for t in self.jobs.iter_mut() {
            while let Some(next) = ledger
                .job(&t.current())
                .filter(|j| j.status == JobStatus::Failed)
                .and_then(|j| {
                    ledger
                        .jobs()
                        .find(|x| x.requeued_from == Some(j.job_id))
                        .map(|x| x.job_id)
                })
            {
                t.chain.push(next);
            }
        }

        for i in 0..self.jobs.len() {
            let job_id = self.jobs[i].current();
            let Some(job) = ledger.job(&job_id).cloned() else {
                continue;
            };
            let holder = job.current_holder();
            if let (ClientMode::UserAttested, JobStatus::Assigned, Some(holder)) = (self.spec.mode, job.status, holder)
            {
                if !self.jobs[i].handshaken.insert((job_id, holder)) {
                    continue;
                }
                let Some(node) = nodes.iter_mut().find(|n| n.key_id() == holder) else {
                    continue;
                };
                let mut transcript = SessionTranscript::default();
                let confirm = !self.spec.bailout;
                let input = self.jobs[i].input.clone();
                let outcome = if node.spec.replay_reports {
                    let mut server = Replayer {
                        inner: node.runtime.server(height),
                        captured: &mut node.captured,
                        replays: &mut node.replays,
                    };
                    self.client
                        .attest_and_send(ledger, &job_id, &mut server, &input, confirm, &mut transcript)
                } else {
                    self.client.attest_and_send(
                        ledger,
                        &job_id,
                        node.runtime.server(height),
                        &input,
                        confirm,
                        &mut transcript,
                    )
                };
                let established = outcome.is_ok();
                match outcome {
                    Ok((_, frame)) => node.runtime.deliver(job_id, frame),
                    Err(e) => self.fail(height, &e),
                }
                sessions.push(SessionLog {
                    height,
                    client: self.spec.name.clone(),
                    node: node.spec.name.clone(),
                    job: job_id,
                    verified: transcript
                        .entries
                        .iter()
                        .any(|e| matches!(e, confidant_core::atls::TranscriptEntry::Verified { .. })),
                    app_data_before_verify: transcript.data_before_verify(),
                    frames: transcript.frames().cloned().collect(),
                    established,
                });
            }
            if self.jobs[i].result.is_none() {
                match job.status {
                    JobStatus::Completed => {
                        self.jobs[i].result = Some(self.client.open_result(&job, storage).map_err(|e| e.to_string()));
                    }
                    JobStatus::Expired => self.jobs[i].result = Some(Err("Expired".into())),
                    _ => {}
                }
            }
        }

        if self.jobs.len() < self.spec.jobs && height >= self.spec.start_at {
            let n = self.jobs.len();
            let input = self.input(n);
            let submitted = match self.spec.mode {
                ClientMode::Onchain => self
                    .client
                    .submit_onchain(ledger, storage, &input, &self.spec.platforms),
                ClientMode::UserAttested => self.client.submit_user_attested(ledger, self.spec.platforms[0]),
            };
            match submitted {
                Ok(job) => self.jobs.push(TrackedJob {
                    chain: vec![job.job_id],
                    expected: execute_workload(&input),
                    input,
                    handshaken: BTreeSet::new(),
                    result: None,
                }),
                Err(e) => self.fail(height, &e),
            }
        }
    }
}

pub struct Sim {
    pub config: SimConfig,
    pub seed: [u8; 32],
    pub ledger: Ledger,
    pub storage: ContentStore,
    pub platforms: Vec<TeePlatform>,
    pub members: Vec<CommitteeMember>,
    pub updater: KeyPair,
    pub nodes: Vec<NodeActor>,
    pub clients: Vec<ClientActor>,
    pub sessions: Vec<SessionLog>,
    pub committee_log: Vec<String>,
}

/// Vendor measurements of every platform plus the approved VM image.
pub fn genesis_policy(platforms: &[TeePlatform]) -> PolicySet {
    let vendor: Vec<_> = platforms
        .iter()
        .flat_map(|p| p.vendor_measurements())
        .map(|(c, d)| Measurement::new(c, d, format!("{}-{c:?}", p_label(c))))
        .collect();
    PolicySet::from_parts(
        1,
        vendor,
        [Measurement::new(
            MeasurementClass::VmImage,
            digest(APPROVED_IMAGE.as_bytes()),
            "approved-image",
        )],
        [],
    )
    .expect("genesis policy is well formed")
}

fn p_label(c: MeasurementClass) -> &'static str {
    if c.is_vendor() {
        "vendor"
    } else {
        "platform"
    }
}

impl Sim {
    pub fn new(config: SimConfig, seed: [u8; 32]) -> Result<Self, SimError> {
        config.validate()?;
        let s = &config.simulation;
        let platforms: Vec<TeePlatform> = PlatformKind::ALL
            .iter()
            .map(|k| TeePlatform::new(*k, &derive(&seed, "root", &[&[k.code()]])))
            .collect();
        let members: Vec<CommitteeMember> = (0..s.committee_size as u64)
            .map(|i| {
                let ms = derive(&seed, "member", &[&i.to_le_bytes()]);
                if (i as usize) < s.dishonest_members {
                    CommitteeMember::dishonest(&ms, CommitteeVerdict::Accept)
                } else {
                    CommitteeMember::honest(&ms)
                }
            })
            .collect();
        let updater = generate_keypair(&derive(&seed, "updater", &[]));
        let ledger = Ledger::new(
            LedgerConfig {
                inline_limit: s.inline_limit,
                default_deadline: s.deadline,
                committee_threshold: s.committee_threshold,
                defenses: config.defenses,
            },
            Genesis {
                policy: genesis_policy(&platforms),
                policy_updater: *updater.public_key(),
                roots: PlatformRoots::from_platforms(&platforms),
                committee: CommitteeRoster::from_members(&members),
            },
        );
        let nodes = config
            .nodes
            .iter()
            .map(|spec| {
                let platform = platforms
                    .iter()
                    .find(|p| p.kind() == spec.platform)
                    .expect("all kinds built");
                let instance = TeeInstance::spawn(
                    platform,
                    digest(spec.image.as_bytes()),
                    &derive(&seed, "node", &[spec.name.as_bytes()]),
                )
                .with_faults(spec.faults.iter().copied().collect());
                let runtime = NodeRuntime::new(
                    spec.name.clone(),
                    instance,
                    spec.path,
                    &derive(&seed, "runtime", &[spec.name.as_bytes()]),
                )
                .with_malice(spec.malice);
                NodeActor {
                    spec: spec.clone(),
                    runtime,
                    registration: None,
                    keys: Vec::new(),
                    outcomes: Vec::new(),
                    captured: None,
                    replays: 0,
                }
            })
            .collect();
        let clients = config
            .clients
            .iter()
            .map(|spec| {
                let cs = derive(&seed, "client", &[spec.name.as_bytes()]);
                ClientActor {
                    spec: spec.clone(),
                    client: Client::new(&cs, s.cache_ttl, config.defenses),
                    seed: cs,
                    jobs: Vec::new(),
                    failures: Vec::new(),
                }
            })
            .collect();
        Ok(Sim {
            config,
            seed,
            ledger,
            storage: ContentStore::in_memory(),
            platforms,
            members,
            updater,
            nodes,
            clients,
            sessions: Vec::new(),
            committee_log: Vec::new(),
        })
    }

    pub fn height(&self) -> u64 {
        self.ledger.height()
    }

    pub fn tick(&mut self) {
        let height = self.ledger.height();

        for node in self.nodes.iter_mut() {
            if node.spec.register_at == height {
                let r = node.runtime.register(&mut self.ledger, &self.storage);
                if r.is_ok() {
                    node.keys.push(node.runtime.key_id());
                }
                node.registration = Some(r);
            } else if node.is_registered() && node.spec.rotate_at.contains(&height) {
                let n = node.runtime.rotations() + 1;
                let rs = derive(&self.seed, "rotate", &[node.spec.name.as_bytes(), &n.to_le_bytes()]);
                let r = node.runtime.rotate_and_reregister(&mut self.ledger, &self.storage, &rs);
                if r.is_ok() {
                    node.keys.push(node.runtime.key_id());
                }
                node.registration = Some(r);
            }
        }

        let pending: Vec<KeyId> = self
            .ledger
            .nodes()
            .filter(|r| r.attestation_status == AttestationStatus::Pending)
            .map(|r| r.key_id)
            .collect();
        for key_id in pending {
            if let Err(e) = verify_pending(&mut self.ledger, &self.storage, &self.members, &key_id) {
                self.committee_log.push(format!("{height} {}: {e}", key_id.short()));
            }
        }

        for client in self.clients.iter_mut() {
            client.step(&mut self.ledger, &self.storage, &mut self.nodes, &mut self.sessions);
        }

        self.ledger
            .assign_jobs(&derive(&self.seed, "assign", &[&height.to_le_bytes()]));

        let per_poll = self.config.simulation.jobs_per_poll;
        for node in self.nodes.iter_mut() {
            for o in node.runtime.poll_and_execute(&mut self.ledger, &self.storage, per_poll) {
                node.outcomes.push((height, o));
            }
        }

        self.ledger.seal_height();
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.tick();
        }
    }

    /// Ticks until the ledger reaches `max_ticks`.
    pub fn run_to_end(&mut self) {
        while self.height() < self.config.simulation.max_ticks {
            self.tick();
        }
    }

    pub fn node(&self, name: &str) -> Result<&NodeActor, SimError> {
        self.nodes
            .iter()
            .find(|n| n.spec.name == name)
            .ok_or_else(|| SimError::ConfigInvalid(format!("scenario needs a node named {name:?}")))
    }

    pub fn client(&self, name: &str) -> Result<&ClientActor, SimError> {
        self.clients
            .iter()
            .find(|c| c.spec.name == name)
            .ok_or_else(|| SimError::ConfigInvalid(format!("scenario needs a client named {name:?}")))
    }

    pub fn status_of(&self, key_id: &KeyId) -> Option<AttestationStatus> {
        self.ledger.node(key_id).map(|r| r.attestation_status)
    }

    /// Client inputs and the workload outputs they would produce.
    pub fn secrets(&self) -> Vec<Vec<u8>> {
        self.clients
            .iter()
            .flat_map(|c| c.jobs.iter())
            .flat_map(|t| [t.input.clone(), t.expected.clone()])
            .collect()
    }

    /// Enclave keys reachable through `LeakEnclaveKey`.
    pub fn leaked_keys(&self) -> Vec<KeyPair> {
        self.nodes
            .iter()
            .filter_map(|n| n.runtime.instance().leaked_key().cloned())
            .collect()
    }

    pub fn event_index_of(
        &self,
        kind: EventKind,
        pred: impl Fn(&confidant_core::ledger::EventBody) -> bool,
    ) -> Option<usize> {
        self.ledger
            .events()
            .iter()
            .position(|e| e.kind == kind && e.decode_body().is_ok_and(|b| pred(&b)))
    }
}
