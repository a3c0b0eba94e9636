// SPDX-License-Identifier: Apache-2.0

//! Offline transcript validation.
//!
//! Replays a transcript against a shadow state and reports every event that
//! the live ledger should never have produced. A clean report means the
//! transcript is internally consistent; it says nothing about events that
//! were never written.

use std::collections::HashMap;
use std::fmt;

use super::events::{EventBody, LedgerEvent};
use super::{AttestationMode, AttestationStatus};
use crate::crypto::{JobId, KeyId};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum ViolationKind {
    HeightGap,
    BodyDecode,
    UnknownKey,
    UnknownJob,
    IllegalNodeTransition,
    IneligibleAssignment,
    GateBypass,
    IllegalJobTransition,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Violation {
    pub index: usize,
    pub height: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "event {} (height {}): {:?}: {}",
            self.index, self.height, self.kind, self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReplayReport {
    pub events: usize,
    /// Number of sealed heights.
    pub heights: u64,
    pub nodes: usize,
    pub jobs: usize,
    pub completed: usize,
    pub violations: Vec<Violation>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

struct NodeShadow {
    status: AttestationStatus,
    revoked: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Phase {
    Submitted,
    Assigned,
    Confirmed,
    Executing,
    Completed,
    Failed,
    Expired,
}

struct JobShadow {
    mode: AttestationMode,
    phase: Phase,
    route: Vec<KeyId>,
    layer: usize,
    confirmed: bool,
}

#[derive(Default)]
struct Replayer {
    nodes: HashMap<KeyId, NodeShadow>,
    jobs: HashMap<JobId, JobShadow>,
    report: ReplayReport,
    index: usize,
    height: u64,
}

impl Replayer {
    fn flag(&mut self, kind: ViolationKind, detail: impl Into<String>) {
        self.report.violations.push(Violation {
            index: self.index,
            height: self.height,
            kind,
            detail: detail.into(),
        });
    }

    fn check_height(&mut self, ev: &LedgerEvent, sealed_prev: bool) {
        let expected = if sealed_prev { self.height + 1 } else { self.height };
        if ev.height != expected && !(self.index == 0 && ev.height == 0) {
            self.flag(
                ViolationKind::HeightGap,
                format!("expected height {expected}, found {}", ev.height),
            );
        }
        self.height = ev.height;
    }

    fn job(&mut self, id: &JobId) -> Option<&mut JobShadow> {
        if !self.jobs.contains_key(id) {
            self.flag(ViolationKind::UnknownJob, format!("{id:?}"));
            return None;
        }
        self.jobs.get_mut(id)
    }

    fn bad_job(&mut self, id: &JobId, phase: Phase, what: &str) {
        self.flag(
            ViolationKind::IllegalJobTransition,
            format!("{what} on job {id:?} in phase {phase:?}"),
        );
    }

    fn holder_check(&mut self, id: &JobId, key: &KeyId) {
        let holder = self.jobs.get(id).and_then(|j| j.route.get(j.layer).copied());
        if holder != Some(*key) {
            self.flag(
                ViolationKind::IllegalJobTransition,
                format!("{key:?} acted on job {id:?} it does not hold"),
            );
        }
    }

    fn apply(&mut self, body: EventBody) {
        match body {
            EventBody::NodeRegistered { key_id, status, .. } => {
                if self.nodes.contains_key(&key_id) {
                    self.flag(
                        ViolationKind::IllegalNodeTransition,
                        format!("{key_id:?} registered twice"),
                    );
                }
                self.nodes.insert(key_id, NodeShadow { status, revoked: false });
                self.report.nodes += 1;
            }
            EventBody::NodeStatusChanged { key_id, status, .. } => match self.nodes.get_mut(&key_id) {
                None => self.flag(ViolationKind::UnknownKey, format!("{key_id:?}")),
                Some(n) => {
                    let legal = n.status == AttestationStatus::Verified && status == AttestationStatus::Rejected;
                    let from = n.status;
                    n.status = status;
                    if !legal {
                        self.flag(
                            ViolationKind::IllegalNodeTransition,
                            format!("{key_id:?} {from:?} -> {status:?}"),
                        );
                    }
                }
            },
            EventBody::CommitteeAgreement { key_id, verdict, .. } => match self.nodes.get_mut(&key_id) {
                None => self.flag(ViolationKind::UnknownKey, format!("{key_id:?}")),
                Some(n) => {
                    let from = n.status;
                    n.status = match verdict {
                        crate::committee::CommitteeVerdict::Accept => AttestationStatus::Verified,
                        crate::committee::CommitteeVerdict::Reject => AttestationStatus::Rejected,
                    };
                    if from != AttestationStatus::Pending {
                        self.flag(
                            ViolationKind::IllegalNodeTransition,
                            format!("agreement for {key_id:?} in state {from:?}"),
                        );
                    }
                }
            },
            EventBody::KeyRevoked { key_id, .. } => match self.nodes.get_mut(&key_id) {
                None => self.flag(ViolationKind::UnknownKey, format!("{key_id:?}")),
                Some(n) if n.revoked => self.flag(
                    ViolationKind::IllegalNodeTransition,
                    format!("{key_id:?} revoked twice"),
                ),
                Some(n) => n.revoked = true,
            },
            EventBody::PolicyUpdated { .. } => {}
            EventBody::JobSubmitted {
                job_id,
                mode,
                requeued_from,
                ..
            } => {
                if self.jobs.contains_key(&job_id) {
                    self.flag(
                        ViolationKind::IllegalJobTransition,
                        format!("job {job_id:?} submitted twice"),
                    );
                }
                if let Some(orig) = requeued_from {
                    match self.jobs.get(&orig).map(|j| j.phase) {
                        Some(Phase::Failed) => {}
                        Some(p) => self.bad_job(&orig, p, "requeue"),
                        None => self.flag(ViolationKind::UnknownJob, format!("{orig:?}")),
                    }
                }
                self.jobs.insert(
                    job_id,
                    JobShadow {
                        mode,
                        phase: Phase::Submitted,
                        route: Vec::new(),
                        layer: 0,
                        confirmed: false,
                    },
                );
                self.report.jobs += 1;
            }
            EventBody::JobAssigned { job_id, route } => {
                for hop in &route {
                    let eligible = self
                        .nodes
                        .get(&hop.key_id)
                        .is_some_and(|n| n.status == AttestationStatus::Verified && !n.revoked);
                    if !eligible {
                        self.flag(
                            ViolationKind::IneligibleAssignment,
                            format!("job {job_id:?} assigned to {:?}", hop.key_id),
                        );
                    }
                }
                let Some(j) = self.job(&job_id) else { return };
                let phase = j.phase;
                j.phase = Phase::Assigned;
                j.route = route.iter().map(|h| h.key_id).collect();
                j.layer = 0;
                j.confirmed = false;
                if phase != Phase::Submitted {
                    self.bad_job(&job_id, phase, "assignment");
                }
            }
            EventBody::AttestationConfirmed { job_id, .. } => {
                let Some(j) = self.job(&job_id) else { return };
                let (phase, mode) = (j.phase, j.mode);
                j.phase = Phase::Confirmed;
                j.confirmed = true;
                if phase != Phase::Assigned || mode != AttestationMode::UserAttested {
                    self.bad_job(&job_id, phase, "confirmation");
                }
            }
            EventBody::JobExecuting { job_id, key_id } => {
                self.holder_check(&job_id, &key_id);
                let Some(j) = self.job(&job_id) else { return };
                let (phase, mode, confirmed) = (j.phase, j.mode, j.confirmed);
                j.phase = Phase::Executing;
                if mode == AttestationMode::UserAttested && !confirmed {
                    self.flag(
                        ViolationKind::GateBypass,
                        format!("job {job_id:?} executing without confirmation"),
                    );
                }
                if !matches!(phase, Phase::Assigned | Phase::Confirmed) {
                    self.bad_job(&job_id, phase, "execution start");
                }
            }
            EventBody::LayerForwarded {
                job_id, key_id, layer, ..
            } => {
                self.holder_check(&job_id, &key_id);
                let Some(j) = self.job(&job_id) else { return };
                let phase = j.phase;
                let ok = phase == Phase::Executing && layer as usize == j.layer + 1 && (layer as usize) < j.route.len();
                j.layer = layer as usize;
                if !ok {
                    self.bad_job(&job_id, phase, "layer forward");
                }
            }
            EventBody::JobCompleted { job_id, key_id, .. } => {
                self.holder_check(&job_id, &key_id);
                let Some(j) = self.job(&job_id) else { return };
                let (phase, mode, confirmed) = (j.phase, j.mode, j.confirmed);
                let final_layer = j.layer + 1 == j.route.len();
                let direct = phase == Phase::Assigned && j.route.len() == 1;
                j.phase = Phase::Completed;
                if mode == AttestationMode::UserAttested && !confirmed {
                    self.flag(
                        ViolationKind::GateBypass,
                        format!("job {job_id:?} completed without confirmation"),
                    );
                }
                if !(phase == Phase::Executing || direct) || !final_layer {
                    self.bad_job(&job_id, phase, "completion");
                }
                self.report.completed += 1;
            }
            EventBody::JobFailed { job_id, .. } => {
                let Some(j) = self.job(&job_id) else { return };
                let phase = j.phase;
                j.phase = Phase::Failed;
                if !matches!(phase, Phase::Assigned | Phase::Confirmed | Phase::Executing) {
                    self.bad_job(&job_id, phase, "failure");
                }
            }
            EventBody::JobExpired { job_id } => {
                let Some(j) = self.job(&job_id) else { return };
                let phase = j.phase;
                j.phase = Phase::Expired;
                if !matches!(phase, Phase::Assigned | Phase::Confirmed) {
                    self.bad_job(&job_id, phase, "expiry");
                }
            }
            EventBody::NodeExcluded { job_id, key_id, .. } => {
                let Some(j) = self.job(&job_id) else { return };
                let phase = j.phase;
                let first = j.route.first().copied();
                j.phase = Phase::Submitted;
                j.route.clear();
                j.layer = 0;
                j.confirmed = false;
                if phase != Phase::Assigned || first != Some(key_id) {
                    self.bad_job(&job_id, phase, "node exclusion");
                }
            }
            EventBody::HeightSealed { height } => {
                if height != self.height {
                    self.flag(
                        ViolationKind::HeightGap,
                        format!("seal for {height} at height {}", self.height),
                    );
                }
                self.report.heights += 1;
            }
        }
    }
}

/// Replays `events` and collects every invariant violation.
pub fn validate_transcript(events: &[LedgerEvent]) -> ReplayReport {
    let mut r = Replayer::default();
    let mut sealed_prev = false;
    for (i, ev) in events.iter().enumerate() {
        r.index = i;
        r.check_height(ev, sealed_prev);
        sealed_prev = false;
        match ev.decode_body() {
            Ok(body) => {
                sealed_prev = matches!(body, EventBody::HeightSealed { .. });
                r.apply(body);
            }
            Err(e) => r.flag(ViolationKind::BodyDecode, e.to_string()),
        }
    }
    r.report.events = events.len();
    r.report
}
