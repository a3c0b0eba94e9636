// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::committee::{aggregate, member_verify, verify_pending, CommitteeMember};
use crate::crypto::{digest, generate_keypair, seal, sign, KeyPair};
use crate::policy::{Measurement, MeasurementClass};
use crate::tee::{Fault, TeeInstance, TeePlatform};

const IMAGE: &[u8] = b"approved-image";

struct World {
    ledger: Ledger,
    storage: ContentStore,
    platforms: Vec<TeePlatform>,
    members: Vec<CommitteeMember>,
    updater: KeyPair,
    client: KeyPair,
}

fn world_with(config: LedgerConfig) -> World {
    let platforms: Vec<_> = PlatformKind::ALL
        .iter()
        .map(|k| TeePlatform::new(*k, &[k.code(); 32]))
        .collect();
    let vendor: Vec<_> = platforms
        .iter()
        .flat_map(|p| p.vendor_measurements())
        .map(|(c, d)| Measurement::new(c, d, ""))
        .collect();
    let policy = PolicySet::from_parts(
        1,
        vendor,
        [Measurement::new(MeasurementClass::VmImage, digest(IMAGE), "img")],
        [],
    )
    .unwrap();
    let members: Vec<_> = (0..5u8).map(|i| CommitteeMember::honest(&[100 + i; 32])).collect();
    let updater = generate_keypair(&[77; 32]);
    let ledger = Ledger::new(
        config,
        Genesis {
            policy,
            policy_updater: *updater.public_key(),
            roots: PlatformRoots::from_platforms(&platforms),
            committee: CommitteeRoster::from_members(&members),
        },
    );
    World {
        ledger,
        storage: ContentStore::in_memory(),
        platforms,
        members,
        updater,
        client: generate_keypair(&[55; 32]),
    }
}

fn world() -> World {
    world_with(LedgerConfig::default())
}

fn spawn(w: &World, kind: PlatformKind, seed: u8) -> TeeInstance {
    let p = w.platforms.iter().find(|p| p.kind() == kind).unwrap();
    TeeInstance::spawn(p, digest(IMAGE), &[seed; 32])
}

fn direct(inst: &TeeInstance) -> Registration {
    Registration {
        node_id: inst.instance_id(),
        platform: inst.platform(),
        public_key: *inst.public_key(),
        epoch: inst.epoch(),
        evidence: Evidence::Direct(inst.attest(&[0; 32])),
    }
}

fn user_job(w: &mut World) -> JobRequest {
    w.ledger
        .submit_job(SubmitJob {
            client_public_key: *w.client.public_key(),
            attestation_mode: AttestationMode::UserAttested,
            payload: None,
            platform_requirements: vec![PlatformKind::SimTdx],
            targets: vec![],
            deadline: None,
        })
        .unwrap()
}

fn onchain_job(w: &mut World, to: &TeeInstance) -> JobRequest {
    let env = seal(b"input", to.public_key(), &[1; 32]);
    w.ledger
        .submit_job(SubmitJob {
            client_public_key: *w.client.public_key(),
            attestation_mode: AttestationMode::OnChainAttested,
            payload: Some(JobPayload::Inline(env)),
            platform_requirements: vec![to.platform()],
            targets: vec![to.key_id()],
            deadline: None,
        })
        .unwrap()
}

fn confirm(w: &World, job: &JobId) -> Confirmation {
    let d = digest(b"report");
    Confirmation {
        job_id: *job,
        report_digest: d,
        passed: true,
        signature: sign(&w.client, &confirmation_payload(job, &d, true)),
    }
}

#[test]
fn direct_registration_verifies_good_and_rejects_faulty() {
    let mut w = world();
    let good = spawn(&w, PlatformKind::SimTdx, 1);
    assert_eq!(
        w.ledger.register_node(direct(&good)).unwrap().attestation_status,
        AttestationStatus::Verified
    );
    for fault in [
        Fault::ForgedRootSignature,
        Fault::TamperedMeasurement(MeasurementClass::Firmware),
        Fault::StaleEpochReport,
    ] {
        let bad = spawn(&w, PlatformKind::SimTdx, 10 + fault_seed(fault)).with_faults([fault].into_iter().collect());
        let rec = w.ledger.register_node(direct(&bad)).unwrap();
        assert_eq!(rec.attestation_status, AttestationStatus::Rejected, "{fault:?}");
    }
    let other = spawn(&w, PlatformKind::SimTdx, 2);
    let mut mismatched = direct(&other);
    mismatched.evidence = Evidence::Direct(good.attest(&[0; 32]));
    assert_eq!(
        w.ledger.register_node(mismatched).unwrap().rejection.as_deref(),
        Some("KeyBindingMismatch")
    );
}

fn fault_seed(f: Fault) -> u8 {
    match f {
        Fault::ForgedRootSignature => 1,
        Fault::TamperedMeasurement(_) => 2,
        Fault::LeakEnclaveKey => 3,
        Fault::StaleEpochReport => 4,
    }
}

#[test]
fn duplicate_and_revoked_registrations_refused() {
    let mut w = world();
    let n = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&n)).unwrap();
    assert!(matches!(
        w.ledger.register_node(direct(&n)),
        Err(LedgerError::DuplicateRegistration(_))
    ));
    w.ledger.revoke_key(&n.key_id(), "test").unwrap();
    assert!(matches!(
        w.ledger.register_node(direct(&n)),
        Err(LedgerError::RevokedKey(_))
    ));
    assert!(matches!(
        w.ledger.revoke_key(&n.key_id(), "again"),
        Err(LedgerError::AlreadyRevoked(_))
    ));
    assert!(matches!(
        w.ledger.revoke_key(&digest(b"nobody"), "x"),
        Err(LedgerError::UnknownKey(_))
    ));
}

#[test]
fn committee_path_reaches_verified() {
    let mut w = world();
    let n = spawn(&w, PlatformKind::SimSev, 1);
    let report = n.attest(&[4; 32]);
    let r = w.storage.put(&report.to_bytes()).unwrap();
    let mut reg = direct(&n);
    reg.evidence = Evidence::Committee(r);
    assert_eq!(
        w.ledger.register_node(reg).unwrap().attestation_status,
        AttestationStatus::Pending
    );
    let members = w.members.clone();
    let rec = verify_pending(&mut w.ledger, &w.storage, &members, &n.key_id()).unwrap();
    assert_eq!(rec.attestation_status, AttestationStatus::Verified);
}

#[test]
fn agreement_below_threshold_or_for_other_report_refused() {
    let mut w = world();
    let n = spawn(&w, PlatformKind::SimSev, 1);
    let report = n.attest(&[4; 32]);
    let r = w.storage.put(&report.to_bytes()).unwrap();
    let mut reg = direct(&n);
    reg.evidence = Evidence::Committee(r);
    w.ledger.register_node(reg).unwrap();
    let votes: Vec<_> = w
        .members
        .iter()
        .map(|m| member_verify(m, &report, n.public_key(), w.ledger.policy(), w.ledger.roots()))
        .collect();
    let mut thin = aggregate(&votes, w.ledger.committee(), 3).unwrap();
    thin.signatures.truncate(2);
    assert!(matches!(
        w.ledger.submit_agreement(&n.key_id(), &thin),
        Err(LedgerError::InvalidAgreement(_))
    ));
    let other = n.attest(&[5; 32]);
    let other_votes: Vec<_> = w
        .members
        .iter()
        .map(|m| member_verify(m, &other, n.public_key(), w.ledger.policy(), w.ledger.roots()))
        .collect();
    let wrong = aggregate(&other_votes, w.ledger.committee(), 3).unwrap();
    assert!(matches!(
        w.ledger.submit_agreement(&n.key_id(), &wrong),
        Err(LedgerError::InvalidAgreement(_))
    ));
}

#[test]
fn submission_validation() {
    let mut w = world();
    let pk = *w.client.public_key();
    let base = SubmitJob {
        client_public_key: pk,
        attestation_mode: AttestationMode::OnChainAttested,
        payload: None,
        platform_requirements: vec![PlatformKind::SimTdx],
        targets: vec![],
        deadline: None,
    };
    assert_eq!(w.ledger.submit_job(base.clone()).unwrap_err(), LedgerError::NoPayload);
    let env = seal(b"x", &pk, &[0; 32]);
    let premature = SubmitJob {
        attestation_mode: AttestationMode::UserAttested,
        payload: Some(JobPayload::Inline(env)),
        ..base.clone()
    };
    assert_eq!(
        w.ledger.submit_job(premature).unwrap_err(),
        LedgerError::PrematurePayload
    );
    let two = SubmitJob {
        attestation_mode: AttestationMode::UserAttested,
        platform_requirements: vec![PlatformKind::SimTdx, PlatformKind::SimSev],
        ..base.clone()
    };
    assert!(matches!(
        w.ledger.submit_job(two),
        Err(LedgerError::InvalidRequirements(_))
    ));
    let huge = seal(&vec![0u8; 5000], &pk, &[0; 32]);
    let too_big = SubmitJob {
        payload: Some(JobPayload::Inline(huge)),
        ..base
    };
    assert!(matches!(
        w.ledger.submit_job(too_big),
        Err(LedgerError::PayloadTooLarge { .. })
    ));
}

#[test]
fn gate_blocks_unconfirmed_user_jobs() {
    let mut w = world();
    let n = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&n)).unwrap();
    let job = user_job(&mut w);
    w.ledger.assign_jobs(&[0; 32]);
    assert_eq!(
        w.ledger.start_execution(&job.job_id, &n.key_id()).unwrap_err(),
        LedgerError::NotConfirmed
    );
    assert_eq!(
        w.ledger
            .post_result(
                &job.job_id,
                &n.key_id(),
                JobPayload::Inline(seal(b"r", w.client.public_key(), &[0; 32]))
            )
            .unwrap_err(),
        LedgerError::NotConfirmed
    );
    let c = confirm(&w, &job.job_id);
    w.ledger.confirm_attestation(&job.job_id, &c).unwrap();
    w.ledger.start_execution(&job.job_id, &n.key_id()).unwrap();
    assert!(validate_transcript(w.ledger.events()).is_clean());
}

#[test]
fn gate_off_lets_execution_through_and_replay_flags_it() {
    let mut config = LedgerConfig::default();
    config.defenses.confirmation_gate = false;
    let mut w = world_with(config);
    let n = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&n)).unwrap();
    let job = user_job(&mut w);
    w.ledger.assign_jobs(&[0; 32]);
    w.ledger.start_execution(&job.job_id, &n.key_id()).unwrap();
    let report = validate_transcript(w.ledger.events());
    assert_eq!(report.count(ViolationKind::GateBypass), 1);
}

#[test]
fn confirmation_errors() {
    let mut w = world();
    let n = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&n)).unwrap();
    let on = onchain_job(&mut w, &n);
    let user = user_job(&mut w);
    let c = confirm(&w, &on.job_id);
    assert!(matches!(
        w.ledger.confirm_attestation(&on.job_id, &c),
        Err(LedgerError::WrongMode { .. })
    ));
    let c = confirm(&w, &user.job_id);
    assert!(matches!(
        w.ledger.confirm_attestation(&user.job_id, &c),
        Err(LedgerError::WrongState(_))
    ));
    w.ledger.assign_jobs(&[0; 32]);
    let other_job = confirm(&w, &on.job_id);
    assert_eq!(
        w.ledger.confirm_attestation(&user.job_id, &other_job).unwrap_err(),
        LedgerError::BadSignature
    );
    let stranger = generate_keypair(&[9; 32]);
    let d = digest(b"report");
    let forged = Confirmation {
        job_id: user.job_id,
        report_digest: d,
        passed: true,
        signature: sign(&stranger, &confirmation_payload(&user.job_id, &d, true)),
    };
    assert_eq!(
        w.ledger.confirm_attestation(&user.job_id, &forged).unwrap_err(),
        LedgerError::BadSignature
    );
    w.ledger.confirm_attestation(&user.job_id, &c).unwrap();
}

#[test]
fn targets_restrict_assignment() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    let b = spawn(&w, PlatformKind::SimTdx, 2);
    w.ledger.register_node(direct(&a)).unwrap();
    w.ledger.register_node(direct(&b)).unwrap();
    for i in 0..20u8 {
        let job = onchain_job(&mut w, &b);
        w.ledger.assign_jobs(&[i; 32]);
        assert_eq!(w.ledger.job(&job.job_id).unwrap().route, vec![b.key_id()]);
    }
    w.ledger.revoke_key(&b.key_id(), "gone").unwrap();
    let job = onchain_job(&mut w, &b);
    assert!(w.ledger.assign_jobs(&[0; 32]).is_empty());
    assert_eq!(w.ledger.job(&job.job_id).unwrap().status, JobStatus::Submitted);
}

#[test]
fn revocation_requeues_in_flight_jobs() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&a)).unwrap();
    let job = user_job(&mut w);
    w.ledger.assign_jobs(&[0; 32]);
    w.ledger.revoke_key(&a.key_id(), "compromised").unwrap();
    assert_eq!(w.ledger.job(&job.job_id).unwrap().status, JobStatus::Failed);
    let requeued = w.ledger.jobs().find(|j| j.requeued_from == Some(job.job_id)).unwrap();
    assert_eq!(requeued.status, JobStatus::Submitted);
    assert!(requeued.excluded.contains(&a.key_id()));
    assert!(validate_transcript(w.ledger.events()).is_clean());
}

#[test]
fn switch_node_excludes_failed_node() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    let b = spawn(&w, PlatformKind::SimTdx, 2);
    w.ledger.register_node(direct(&a)).unwrap();
    w.ledger.register_node(direct(&b)).unwrap();
    let job = user_job(&mut w);
    w.ledger.assign_jobs(&[0; 32]);
    let first = w.ledger.job(&job.job_id).unwrap().route[0];
    let evidence = FailureEvidence {
        job_id: job.job_id,
        key_id: first,
        reason: "bad report".into(),
        signature: sign(&w.client, &failure_payload(&job.job_id, &first, "bad report")),
    };
    let back = w.ledger.switch_node(&evidence).unwrap();
    assert_eq!(back.status, JobStatus::Submitted);
    assert!(matches!(
        w.ledger.switch_node(&evidence),
        Err(LedgerError::WrongState(_))
    ));
    w.ledger.assign_jobs(&[1; 32]);
    let second = w.ledger.job(&job.job_id).unwrap().route[0];
    assert_ne!(first, second);

    let evidence = FailureEvidence {
        job_id: job.job_id,
        key_id: second,
        reason: "bad".into(),
        signature: sign(&w.client, &failure_payload(&job.job_id, &second, "bad")),
    };
    w.ledger.switch_node(&evidence).unwrap();
    assert!(w.ledger.assign_jobs(&[2; 32]).is_empty());
    assert_eq!(w.ledger.job(&job.job_id).unwrap().status, JobStatus::Submitted);
    assert_eq!(
        w.ledger
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::NodeExcluded)
            .count(),
        2
    );
    assert!(validate_transcript(w.ledger.events()).is_clean());
}

#[test]
fn deadlines_expire_assigned_jobs() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&a)).unwrap();
    let job = w
        .ledger
        .submit_job(SubmitJob {
            client_public_key: *w.client.public_key(),
            attestation_mode: AttestationMode::UserAttested,
            payload: None,
            platform_requirements: vec![PlatformKind::SimTdx],
            targets: vec![],
            deadline: Some(2),
        })
        .unwrap();
    w.ledger.assign_jobs(&[0; 32]);
    for _ in 0..3 {
        w.ledger.seal_height();
    }
    assert_eq!(w.ledger.job(&job.job_id).unwrap().status, JobStatus::Expired);
    assert_eq!(
        w.ledger.start_execution(&job.job_id, &a.key_id()).unwrap_err(),
        LedgerError::Expired
    );
    let report = validate_transcript(w.ledger.events());
    assert!(report.is_clean(), "{:?}", report.violations);
    assert_eq!(report.heights, 3);
}

#[test]
fn policy_updates_need_the_updater_and_a_newer_version() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&a)).unwrap();
    let update = PolicyUpdate {
        delta: PolicyDelta {
            add_community_reject: vec![Measurement::new(MeasurementClass::VmImage, digest(IMAGE), "cve")],
            ..PolicyDelta::default()
        },
        new_version: 2,
    };
    let stranger = generate_keypair(&[1; 32]);
    assert_eq!(
        w.ledger
            .update_policy(&update, &sign(&stranger, &update.signed_payload()))
            .unwrap_err(),
        LedgerError::Unauthorized
    );
    let sig = sign(&w.updater, &update.signed_payload());
    w.ledger.update_policy(&update, &sig).unwrap();
    assert_eq!(w.ledger.policy().version(), 2);
    assert!(matches!(
        w.ledger.update_policy(&update, &sig),
        Err(LedgerError::Policy(PolicyError::StaleVersion { .. }))
    ));
    let storage = ContentStore::in_memory();
    assert_eq!(w.ledger.reevaluate_nodes(&storage), vec![a.key_id()]);
    assert_eq!(
        w.ledger.node(&a.key_id()).unwrap().attestation_status,
        AttestationStatus::Rejected
    );
    assert!(validate_transcript(w.ledger.events()).is_clean());
}

#[test]
fn layered_job_forwards_then_completes() {
    let mut w = world();
    let tdx = spawn(&w, PlatformKind::SimTdx, 1);
    let sev = spawn(&w, PlatformKind::SimSev, 2);
    w.ledger.register_node(direct(&tdx)).unwrap();
    w.ledger.register_node(direct(&sev)).unwrap();
    let env = crate::crypto::seal_layered(b"deep", &[*tdx.public_key(), *sev.public_key()], &[3; 32]);
    let job = w
        .ledger
        .submit_job(SubmitJob {
            client_public_key: *w.client.public_key(),
            attestation_mode: AttestationMode::OnChainAttested,
            payload: Some(JobPayload::Inline(env.clone())),
            platform_requirements: vec![PlatformKind::SimTdx, PlatformKind::SimSev],
            targets: vec![tdx.key_id(), sev.key_id()],
            deadline: None,
        })
        .unwrap();
    w.ledger.assign_jobs(&[0; 32]);
    w.ledger.start_execution(&job.job_id, &tdx.key_id()).unwrap();
    let result = JobPayload::Inline(seal(b"r", w.client.public_key(), &[0; 32]));
    assert!(matches!(
        w.ledger.post_result(&job.job_id, &tdx.key_id(), result.clone()),
        Err(LedgerError::WrongState(_))
    ));
    let inner = SealedEnvelope::from_bytes(&tdx.open(&env).unwrap()).unwrap();
    w.ledger
        .forward_layer(&job.job_id, &tdx.key_id(), JobPayload::Inline(inner))
        .unwrap();
    assert_eq!(
        w.ledger
            .post_result(&job.job_id, &tdx.key_id(), result.clone())
            .unwrap_err(),
        LedgerError::NotAssignedToYou
    );
    w.ledger.post_result(&job.job_id, &sev.key_id(), result).unwrap();
    let report = validate_transcript(w.ledger.events());
    assert!(report.is_clean(), "{:?}", report.violations);
    assert_eq!(report.completed, 1);
}

#[test]
fn replay_flags_spliced_and_gapped_transcripts() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&a)).unwrap();
    let job = user_job(&mut w);
    w.ledger.assign_jobs(&[0; 32]);
    w.ledger.seal_height();
    let c = confirm(&w, &job.job_id);
    w.ledger.confirm_attestation(&job.job_id, &c).unwrap();
    w.ledger.start_execution(&job.job_id, &a.key_id()).unwrap();
    w.ledger.seal_height();
    let events = w.ledger.events().to_vec();
    assert!(validate_transcript(&events).is_clean());

    let exec = events.iter().position(|e| e.kind == EventKind::JobExecuting).unwrap();
    let mut spliced = events.clone();
    let mut moved = spliced.remove(exec);
    moved.height = 0;
    let assigned = spliced.iter().position(|e| e.kind == EventKind::JobAssigned).unwrap();
    spliced.insert(assigned + 1, moved);
    let report = validate_transcript(&spliced);
    let v = report
        .violations
        .iter()
        .find(|v| v.kind == ViolationKind::GateBypass)
        .expect("gate bypass flagged");
    assert_eq!(v.height, 0);

    let mut gapped = events.clone();
    let seal_idx = gapped.iter().position(|e| e.kind == EventKind::HeightSealed).unwrap();
    gapped.remove(seal_idx);
    assert!(validate_transcript(&gapped).count(ViolationKind::HeightGap) > 0);
}

#[test]
fn adversary_status_override_visible_to_clients_not_transcript() {
    let mut w = world();
    let bad = spawn(&w, PlatformKind::SimTdx, 1).with_faults([Fault::ForgedRootSignature].into_iter().collect());
    w.ledger.register_node(direct(&bad)).unwrap();
    let before = w.ledger.events().len();
    assert!(w
        .ledger
        .adversary_set_status(&bad.key_id(), AttestationStatus::Verified));
    assert_eq!(w.ledger.events().len(), before);
    assert_eq!(w.ledger.eligible_nodes(PlatformKind::SimTdx).len(), 1);
}

#[test]
fn transcript_round_trips_through_jsonl() {
    let mut w = world();
    let a = spawn(&w, PlatformKind::SimTdx, 1);
    w.ledger.register_node(direct(&a)).unwrap();
    let _ = onchain_job(&mut w, &a);
    w.ledger.assign_jobs(&[0; 32]);
    w.ledger.seal_height();
    let text = w.ledger.transcript_jsonl();
    assert_eq!(from_jsonl(&text).unwrap(), w.ledger.events());
}
