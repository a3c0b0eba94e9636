// SPDX-License-Identifier: Apache-2.0

//! The built-in scenario catalog. Each scenario ships a default config
//! (`configs/<name>.toml`) and a driver that may intervene between ticks
//! and grades the run. Every run also gets the common checks: the
//! transcript replays clean, the adversary recovers no plaintext, and no
//! node computed on an unconfirmed user-attested job.

use std::collections::BTreeMap;
use std::path::Path;

use confidant_core::client::Client;
use confidant_core::crypto::{digest, digest_parts, generate_keypair, seal, sign, JobId, KeyId};
use confidant_core::ledger::{
    AttestationStatus, EventBody, Evidence, JobPayload, LedgerError, PolicyUpdate, Registration,
};
use confidant_core::policy::{Measurement, MeasurementClass, PolicyDelta, PolicySet};
use confidant_core::tee::{Fault, PlatformKind};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{parse_seed, seed_hex, SimConfig};
use crate::harness::{derive, Sim};
use crate::oracle::{self, Observation};
use crate::{Checks, SimError, Verdict};

pub type Driver = fn(&mut Sim, &mut Checks) -> Result<(), SimError>;

pub struct ScenarioDef {
    pub name: &'static str,
    pub summary: &'static str,
    pub config: &'static str,
    pub run: Driver,
}

impl ScenarioDef {
    pub fn default_config(&self) -> SimConfig {
        SimConfig::from_toml(self.config).expect("built-in config is valid")
    }
}

macro_rules! scenario {
    ($name:ident, $summary:expr) => {
        ScenarioDef {
            name: stringify!($name),
            summary: $summary,
            config: include_str!(concat!("../configs/", stringify!($name), ".toml")),
            run: $name,
        }
    };
}

pub const SCENARIOS: &[ScenarioDef] = &[
    scenario!(
        nominal_onchain,
        "on-chain attested jobs, single and dual layer, inline and stored"
    ),
    scenario!(
        nominal_user_attested,
        "user-attested jobs over aTLS with on-ledger confirmation"
    ),
    scenario!(
        forged_report_direct,
        "forged root signature and key-binding mismatch at direct registration"
    ),
    scenario!(
        forged_report_committee,
        "forged and tampered reports before a committee with one dishonest member"
    ),
    scenario!(
        tampered_measurement,
        "tampered firmware; falsified ledger status caught by client re-verification"
    ),
    scenario!(
        revoked_key_reuse,
        "revoked key tries to re-register; no work reaches it"
    ),
    scenario!(bailout_user, "user verifies, never confirms; node must not compute"),
    scenario!(
        stale_report_replay,
        "network attacker replays an old report into a handshake"
    ),
    scenario!(
        rotation_epoch,
        "enclave key rotation, epoch increments, old keys retired"
    ),
    scenario!(
        single_layer_compromise,
        "one of two layer keys leaks; plaintext stays sealed"
    ),
    scenario!(
        policy_community_override,
        "governed policy update; community reject overrides vendor accept"
    ),
    scenario!(
        assignment_uniformity,
        "randomized assignment over ten nodes, chi-square"
    ),
];

pub fn find_scenario(name: &str) -> Result<&'static ScenarioDef, SimError> {
    SCENARIOS
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| SimError::UnknownScenario(name.to_string()))
}

/// Runs a scenario. `config` defaults to the scenario's built-in config.
/// With `out`, the transcript is written to `<out>/<scenario>.jsonl` and
/// the verdict to `<out>/<scenario>.verdict.json`.
pub fn run_scenario(
    name: &str,
    config: Option<SimConfig>,
    seed: &[u8; 32],
    out: Option<&Path>,
) -> Result<Verdict, SimError> {
    let def = find_scenario(name)?;
    let config = config.unwrap_or_else(|| def.default_config());
    if let Some(named) = &config.simulation.scenario {
        if named != name {
            return Err(SimError::ConfigInvalid(format!(
                "config is for scenario {named:?}, not {name:?}"
            )));
        }
    }
    let mut sim = Sim::new(config, *seed)?;
    let mut checks = Checks::default();
    (def.run)(&mut sim, &mut checks)?;
    let oracle = common_checks(&sim, &mut checks);

    let mut verdict = Verdict {
        scenario: name.to_string(),
        seed: seed_hex(seed),
        height: sim.height(),
        events: sim.ledger.events().len(),
        assertions: checks.into_inner(),
        oracle,
        transcript: None,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.jsonl"));
        sim.ledger.write_transcript(&path)?;
        let json = serde_json::to_string_pretty(&verdict).expect("verdict serializes");
        std::fs::write(dir.join(format!("{name}.verdict.json")), json + "\n")?;
        verdict.transcript = Some(path);
    }
    Ok(verdict)
}

/// Convenience for tests and tools: built-in config, hex seed.
pub fn run_default(name: &str, seed_hex: &str) -> Result<Verdict, SimError> {
    run_scenario(name, None, &parse_seed(seed_hex)?, None)
}

/// Everything outside the enclaves.
pub fn observe(sim: &Sim) -> Observation {
    let mut obs = Observation::default();
    obs.add_events(sim.ledger.events());
    obs.add_storage(sim.storage.snapshot().into_iter().map(|(_, b)| b));
    for s in &sim.sessions {
        obs.add_session(&s.frames);
    }
    for c in &sim.clients {
        for w in c.client.writes() {
            obs.add_blob(w);
        }
    }
    obs
}

fn common_checks(sim: &Sim, c: &mut Checks) -> oracle::OracleReport {
    let replay = confidant_core::ledger::validate_transcript(sim.ledger.events());
    c.check(
        "transcript_replays_clean",
        replay.is_clean(),
        replay
            .violations
            .first()
            .map(|v| v.to_string())
            .unwrap_or_else(|| format!("{} events", replay.events)),
    );
    let report = oracle::attack(&observe(sim), &sim.leaked_keys(), &sim.secrets());
    c.check(
        "adversary_recovers_no_plaintext",
        report.recovered_nothing(),
        format!(
            "{} secrets, {} envelopes, {} leaked keys, {} layers opened, {} recovered",
            sim.secrets().len(),
            report.envelopes,
            sim.leaked_keys().len(),
            report.layers_opened,
            report.recovered.len()
        ),
    );
    let violations: u64 = sim.nodes.iter().map(|n| n.runtime.gate_violations()).sum();
    c.check(
        "no_compute_before_confirmation",
        violations == 0,
        format!("{violations} unconfirmed computations"),
    );
    report
}

fn key(sim: &Sim, name: &str) -> Result<KeyId, SimError> {
    Ok(sim.node(name)?.key_id())
}

fn internal(e: impl std::fmt::Display) -> SimError {
    SimError::ConfigInvalid(e.to_string())
}

fn bodies(sim: &Sim) -> impl Iterator<Item = (usize, EventBody)> + '_ {
    sim.ledger
        .events()
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.decode_body().ok().map(|b| (i, b)))
}

fn ever_verified(sim: &Sim, k: &KeyId) -> bool {
    bodies(sim).any(|(_, b)| match b {
        EventBody::NodeRegistered { key_id, status, .. } | EventBody::NodeStatusChanged { key_id, status, .. } => {
            key_id == *k && status == AttestationStatus::Verified
        }
        _ => false,
    })
}

fn revoked_at(sim: &Sim, k: &KeyId) -> Option<usize> {
    bodies(sim).find_map(|(i, b)| matches!(b, EventBody::KeyRevoked { key_id, .. } if key_id == *k).then_some(i))
}

/// Assignments routed through `k` at event index `from` or later.
fn assigned_after(sim: &Sim, k: &KeyId, from: usize) -> usize {
    bodies(sim)
        .filter(|(i, b)| {
            *i >= from && matches!(b, EventBody::JobAssigned { route, .. } if route.iter().any(|h| h.key_id == *k))
        })
        .count()
}

/// Executions, forwards and completions by `k` at index `from` or later.
fn worked_after(sim: &Sim, k: &KeyId, from: usize) -> usize {
    bodies(sim)
        .filter(|(i, b)| {
            *i >= from
                && match b {
                    EventBody::JobExecuting { key_id, .. }
                    | EventBody::LayerForwarded { key_id, .. }
                    | EventBody::JobCompleted { key_id, .. } => key_id == k,
                    _ => false,
                }
        })
        .count()
}

fn check_results(sim: &Sim, c: &mut Checks, client: &str) -> Result<bool, SimError> {
    let actor = sim.client(client)?;
    let ok = actor.jobs.iter().filter(|t| t.succeeded()).count();
    let pending = actor.jobs.iter().filter(|t| t.result.is_none()).count();
    let bad: Vec<String> = actor
        .jobs
        .iter()
        .filter_map(|t| match &t.result {
            Some(Err(e)) => Some(e.clone()),
            Some(Ok(_)) if !t.succeeded() => Some("output differs from workload".into()),
            _ => None,
        })
        .collect();
    let mut detail = format!("{ok}/{} jobs correct, {pending} pending", actor.spec.jobs);
    if let Some(first) = bad.first() {
        detail.push_str(&format!(", first error: {first}"));
    }
    Ok(c.check(
        &format!("{client}_results_match_workload"),
        ok == actor.spec.jobs,
        detail,
    ))
}

fn all_verified(sim: &Sim, names: &[&str]) -> Result<(bool, String), SimError> {
    let mut off = Vec::new();
    for n in names {
        let k = key(sim, n)?;
        if sim.status_of(&k) != Some(AttestationStatus::Verified) {
            off.push(format!("{n}={:?}", sim.status_of(&k)));
        }
    }
    Ok((off.is_empty(), off.join(", ")))
}

fn never_verified(sim: &Sim, c: &mut Checks, name: &str, check: &str) -> Result<(), SimError> {
    let k = key(sim, name)?;
    let record = sim.ledger.node(&k);
    c.check(
        check,
        !ever_verified(sim, &k) && record.is_some_and(|r| r.attestation_status == AttestationStatus::Rejected),
        format!(
            "{name}: {:?} {}",
            record.map(|r| r.attestation_status),
            record.and_then(|r| r.rejection.clone()).unwrap_or_default()
        ),
    );
    Ok(())
}

/// Generated policy with `entries` measurements: 60% vendor, 30%
/// platform, 10% community reject.
pub fn generated_policy(entries: usize) -> PolicySet {
    const VENDOR: [MeasurementClass; 4] = [
        MeasurementClass::Hardware,
        MeasurementClass::Firmware,
        MeasurementClass::Vmm,
        MeasurementClass::Drivers,
    ];
    let (mut vendor, mut platform, mut community) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..entries {
        let d = digest_parts(&[b"confidant/generated-measurement", &(i as u64).to_le_bytes()]);
        let label = format!("m{i:04}");
        match i % 10 {
            0..=5 => vendor.push(Measurement::new(VENDOR[i % 4], d, label)),
            6..=8 => platform.push(Measurement::new(MeasurementClass::VmImage, d, label)),
            _ => community.push(Measurement::new(VENDOR[i % 4], d, label)),
        }
    }
    PolicySet::from_parts(1, vendor, platform, community).expect("generated entries are distinct")
}

pub const POLICY_BUDGET: usize = 40_960;

fn nominal_onchain(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    let names: Vec<String> = sim.nodes.iter().map(|n| n.spec.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let (ok, detail) = all_verified(sim, &names)?;
    c.check("all_nodes_verified", ok, detail);
    let agreements = bodies(sim)
        .filter(|(_, b)| matches!(b, EventBody::CommitteeAgreement { .. }))
        .count();
    c.check(
        "committee_path_node_verified",
        agreements > 0,
        format!("{agreements} agreements"),
    );
    check_results(sim, c, "alice")?;
    check_results(sim, c, "bob")?;
    let stored = bodies(sim)
        .filter(|(_, b)| {
            matches!(
                b,
                EventBody::JobSubmitted {
                    payload: Some(JobPayload::Stored(_)),
                    ..
                } | EventBody::LayerForwarded {
                    payload: JobPayload::Stored(_),
                    ..
                }
            )
        })
        .count();
    c.check(
        "large_inputs_travel_by_storage_reference",
        stored > 0,
        format!("{stored} stored payloads"),
    );
    let bob_jobs = sim.client("bob")?.jobs.len();
    let forwarded = bodies(sim)
        .filter(|(_, b)| matches!(b, EventBody::LayerForwarded { .. }))
        .count();
    c.check(
        "dual_layer_jobs_cross_both_platforms",
        bob_jobs > 0 && forwarded >= bob_jobs,
        format!("{forwarded} forwards for {bob_jobs} dual-layer jobs"),
    );
    Ok(())
}

fn nominal_user_attested(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    check_results(sim, c, "carol")?;
    check_results(sim, c, "dave")?;
    let established: Vec<_> = sim.sessions.iter().filter(|s| s.established).collect();
    c.check(
        "input_sent_only_after_attestation",
        !established.is_empty() && established.iter().all(|s| s.verified && !s.app_data_before_verify),
        format!("{} sessions", established.len()),
    );
    let mut confirmed: BTreeMap<JobId, usize> = BTreeMap::new();
    let mut early = 0;
    for (i, b) in bodies(sim) {
        match b {
            EventBody::AttestationConfirmed { job_id, .. } => {
                confirmed.insert(job_id, i);
            }
            EventBody::JobExecuting { job_id, .. } if !confirmed.contains_key(&job_id) => early += 1,
            _ => {}
        }
    }
    c.check(
        "confirmation_precedes_execution",
        early == 0 && !confirmed.is_empty(),
        format!("{} confirmations, {early} early executions", confirmed.len()),
    );
    let mut mismatched = 0;
    for s in &established {
        let attested = s.frames.iter().find_map(|f| match f {
            confidant_core::atls::Frame::ServerKey { report, .. } => Some(report.digest()),
            _ => None,
        });
        let on_ledger = bodies(sim).find_map(|(_, b)| match b {
            EventBody::AttestationConfirmed { job_id, report_digest } if job_id == s.job => Some(report_digest),
            _ => None,
        });
        if attested.is_none() || attested != on_ledger {
            mismatched += 1;
        }
    }
    c.check(
        "confirmation_names_the_attested_report",
        mismatched == 0,
        format!("{mismatched} mismatched"),
    );
    Ok(())
}

fn forged_report_direct(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    let genuine = sim.node("tdx-0")?.runtime.instance().clone();
    let attacker = generate_keypair(&derive(&sim.seed, "impostor", &[]));
    let impostor = sim.ledger.register_node(Registration {
        node_id: digest(b"impostor"),
        platform: genuine.platform(),
        public_key: *attacker.public_key(),
        epoch: genuine.epoch(),
        evidence: Evidence::Direct(genuine.attest(&derive(&sim.seed, "impostor-nonce", &[]))),
    });
    c.check(
        "key_binding_mismatch_rejected",
        matches!(&impostor, Ok(r) if r.attestation_status == AttestationStatus::Rejected
            && r.rejection.as_deref().is_some_and(|s| s.contains("KeyBindingMismatch"))),
        format!(
            "{:?}",
            impostor.as_ref().map(|r| (r.attestation_status, r.rejection.clone()))
        ),
    );
    sim.run_to_end();
    never_verified(sim, c, "tdx-forged", "forged_root_signature_never_verified")?;
    let forged = key(sim, "tdx-forged")?;
    let routed = assigned_after(sim, &forged, 0) + assigned_after(sim, &attacker.key_id(), 0);
    c.check(
        "no_job_routed_to_rejected_keys",
        routed == 0,
        format!("{routed} assignments"),
    );
    check_results(sim, c, "alice")?;
    check_results(sim, c, "erin")?;
    Ok(())
}

fn forged_report_committee(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    never_verified(sim, c, "tdx-forged", "forged_report_never_verified")?;
    never_verified(sim, c, "sev-tampered", "tampered_report_never_verified")?;
    let (ok, detail) = all_verified(sim, &["tdx-0", "sev-0"])?;
    let agreements = bodies(sim)
        .filter(|(_, b)| matches!(b, EventBody::CommitteeAgreement { .. }))
        .count();
    c.check(
        "honest_nodes_verified_by_committee",
        ok && agreements >= 4,
        format!("{agreements} agreements {detail}"),
    );
    check_results(sim, c, "alice")?;
    Ok(())
}

fn tampered_measurement(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.tick();
    never_verified(sim, c, "sev-tampered", "tampered_node_rejected_at_registration")?;
    let t = key(sim, "sev-tampered")?;
    let falsified = sim.ledger.adversary_set_status(&t, AttestationStatus::Verified);
    c.check("ledger_status_falsified", falsified, "record forced to Verified");
    sim.run_to_end();
    let erin = sim.client("erin")?;
    let detected = erin
        .failures
        .iter()
        .filter(|f| f.kind == "RecordVerificationFailed")
        .count();
    c.check(
        "client_detects_falsified_record",
        detected > 0,
        erin.failures.first().map(|f| f.detail.clone()).unwrap_or_default(),
    );
    let sealed_to = bodies(sim)
        .filter(|(_, b)| matches!(b, EventBody::JobSubmitted { targets, .. } if targets.contains(&t)))
        .count();
    c.check(
        "no_input_sealed_to_tampered_enclave",
        sealed_to == 0 && erin.jobs.is_empty(),
        format!("{sealed_to} submissions target it"),
    );
    check_results(sim, c, "frank")?;
    Ok(())
}

fn revoked_key_reuse(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run(3);
    let k = key(sim, "tdx-0")?;
    sim.ledger.revoke_key(&k, "compromised").map_err(internal)?;
    let at = revoked_at(sim, &k).expect("just revoked");
    let node = sim
        .nodes
        .iter_mut()
        .find(|n| n.spec.name == "tdx-0")
        .expect("checked above");
    let again = node.runtime.register(&mut sim.ledger, &sim.storage);
    c.check(
        "revoked_key_cannot_reregister",
        matches!(again, Err(LedgerError::RevokedKey(_))),
        format!("{:?}", again.as_ref().map(|r| r.attestation_status)),
    );
    node.registration = Some(again);
    sim.run_to_end();
    let assigned = assigned_after(sim, &k, at);
    let worked = worked_after(sim, &k, at);
    c.check(
        "no_work_reaches_revoked_key",
        assigned == 0 && worked == 0,
        format!("{assigned} assignments, {worked} executions after revocation"),
    );
    check_results(sim, c, "gina")?;
    check_results(sim, c, "hank")?;
    Ok(())
}

fn bailout_user(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    let ivan = sim.client("ivan")?;
    let ids: Vec<JobId> = ivan.jobs.iter().flat_map(|t| t.chain.clone()).collect();
    let verified = sim
        .sessions
        .iter()
        .any(|s| s.client == "ivan" && s.established && s.verified);
    c.check(
        "bailing_user_attested_the_node",
        verified,
        "session established, never confirmed",
    );
    let touched = bodies(sim)
        .filter(|(_, b)| match b {
            EventBody::JobExecuting { job_id, .. } | EventBody::JobCompleted { job_id, .. } => ids.contains(job_id),
            _ => false,
        })
        .count();
    c.check(
        "node_never_computes_for_bailed_job",
        !ids.is_empty() && touched == 0,
        format!("{touched} execution events"),
    );
    let expired = ivan
        .jobs
        .iter()
        .all(|t| matches!(&t.result, Some(Err(e)) if e == "Expired"));
    c.check(
        "bailed_job_expires",
        !ivan.jobs.is_empty() && expired,
        format!("{:?}", ivan.jobs.first().map(|t| &t.result)),
    );
    check_results(sim, c, "judy")?;
    Ok(())
}

fn stale_report_replay(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    let victim = sim.node("victim")?;
    let backup = key(sim, "backup")?;
    let kate = sim.client("kate")?;
    let stale = kate
        .failures
        .iter()
        .filter(|f| f.kind == "Handshake/StaleReport")
        .count();
    c.check(
        "replayed_report_detected",
        victim.replays > 0 && stale as u64 == victim.replays,
        format!("{} replays, {stale} detected", victim.replays),
    );
    let leaked_after_replay = sim
        .sessions
        .iter()
        .filter(|s| !s.established)
        .filter(|s| {
            s.frames.iter().any(|f| {
                matches!(
                    f,
                    confidant_core::atls::Frame::ClientFinish { .. } | confidant_core::atls::Frame::AppData { .. }
                )
            })
        })
        .count();
    c.check(
        "nothing_sent_after_stale_report",
        leaked_after_replay == 0,
        format!("{leaked_after_replay} sessions continued"),
    );
    let victim_key = victim.key_id();
    let switched: Vec<JobId> = bodies(sim)
        .filter_map(|(_, b)| match b {
            EventBody::NodeExcluded { job_id, key_id, .. } if key_id == victim_key => Some(job_id),
            _ => None,
        })
        .collect();
    let excluded = switched
        .iter()
        .all(|j| sim.ledger.job(j).is_some_and(|job| job.excluded.contains(&victim_key)));
    c.check(
        "victim_excluded_from_switched_job",
        !switched.is_empty() && excluded,
        format!("{} switched", switched.len()),
    );
    let by_backup = bodies(sim)
        .filter(|(_, b)| matches!(b, EventBody::JobCompleted { job_id, key_id, .. } if switched.contains(job_id) && *key_id == backup))
        .count();
    c.check(
        "switched_job_completed_elsewhere",
        !switched.is_empty() && by_backup == switched.len(),
        format!("{by_backup}/{} on backup", switched.len()),
    );
    check_results(sim, c, "kate")?;
    Ok(())
}

fn rotation_epoch(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    let first = *sim.node("tdx-0")?.runtime.instance().public_key();
    let probe = seal(b"pre-rotation probe", &first, &derive(&sim.seed, "probe", &[]));
    sim.run_to_end();
    let node = sim.node("tdx-0")?;
    let epochs: Vec<u64> = node
        .keys
        .iter()
        .filter_map(|k| {
            bodies(sim).find_map(|(_, b)| match b {
                EventBody::NodeRegistered { key_id, epoch, .. } if key_id == *k => Some(epoch),
                _ => None,
            })
        })
        .collect();
    let want: Vec<u64> = (0..=node.spec.rotate_at.len() as u64).collect();
    c.check("epoch_increments_per_rotation", epochs == want, format!("{epochs:?}"));
    let retired = &node.keys[..node.keys.len().saturating_sub(1)];
    let all_revoked = retired.iter().all(|k| sim.ledger.node(k).is_some_and(|r| r.revoked));
    c.check(
        "retired_keys_revoked",
        !retired.is_empty() && all_revoked,
        format!("{} retired", retired.len()),
    );
    let mut leaks = 0;
    for k in retired {
        let at = revoked_at(sim, k).unwrap_or(0);
        leaks += assigned_after(sim, k, at) + worked_after(sim, k, at);
    }
    c.check("no_work_for_retired_keys", leaks == 0, format!("{leaks} events"));
    let opened = node.runtime.instance().open(&probe);
    c.check(
        "pre_rotation_envelope_unreadable",
        opened.is_err(),
        format!("{:?}", opened.err()),
    );
    check_results(sim, c, "lily")?;
    let mike = sim.client("mike")?;
    let stranded = |t: &crate::harness::TrackedJob| {
        sim.ledger
            .job(&t.current())
            .is_some_and(|j| j.targets.iter().any(|k| retired.contains(k)))
    };
    let ok = mike.jobs.iter().filter(|t| t.succeeded()).count();
    let resolved = mike.jobs.iter().all(|t| t.succeeded() || stranded(t));
    c.check(
        "onchain_jobs_complete_or_stay_sealed_to_retired_key",
        ok > 0 && resolved && mike.jobs.len() == mike.spec.jobs,
        format!("{ok}/{} completed", mike.spec.jobs),
    );
    Ok(())
}

fn single_layer_compromise(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run_to_end();
    let sev = key(sim, "sev-0")?;
    let tdx = key(sim, "tdx-0")?;
    let nina = sim.client("nina")?;
    let outer_first = !nina.jobs.is_empty()
        && nina
            .jobs
            .iter()
            .all(|t| sim.ledger.job(&t.chain[0]).is_some_and(|j| j.route == [sev, tdx]));
    c.check(
        "outer_layer_on_leaking_platform",
        outer_first,
        "route SimSev then SimTdx",
    );
    check_results(sim, c, "nina")?;

    let obs = observe(sim);
    let leaked = sim.leaked_keys();
    let r = oracle::attack(&obs, &leaked, &sim.secrets());
    c.check(
        "leaked_layer_yields_inner_envelope_only",
        leaked.len() == 1 && r.inner_envelopes > 0 && r.recovered_nothing(),
        format!(
            "{} layers opened, {} inner envelopes",
            r.layers_opened, r.inner_envelopes
        ),
    );

    let inst = sim.node("tdx-0")?.runtime.instance().clone();
    let mut faults = inst.faults().clone();
    faults.insert(Fault::LeakEnclaveKey);
    let mut both = leaked.clone();
    both.extend(inst.with_faults(faults).leaked_key().cloned());
    let inputs: Vec<Vec<u8>> = sim.client("nina")?.jobs.iter().map(|t| t.input.clone()).collect();
    let r = oracle::attack(&obs, &both, &inputs);
    c.check(
        "both_layer_keys_would_expose_inputs",
        !inputs.is_empty() && r.recovered.len() == inputs.len(),
        format!("{}/{} inputs with both keys", r.recovered.len(), inputs.len()),
    );
    Ok(())
}

fn policy_community_override(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    sim.run(4);
    let sev = sim
        .platforms
        .iter()
        .find(|p| p.kind() == PlatformKind::SimSev)
        .expect("all platforms built");
    let firmware = sev.vendor_measurements()[&MeasurementClass::Firmware];
    let update = PolicyUpdate {
        delta: PolicyDelta {
            add_community_reject: vec![Measurement::new(
                MeasurementClass::Firmware,
                firmware,
                "sev-firmware-advisory",
            )],
            ..PolicyDelta::default()
        },
        new_version: sim.ledger.policy().version() + 1,
    };
    let rogue = generate_keypair(&derive(&sim.seed, "rogue-updater", &[]));
    let refused = sim
        .ledger
        .update_policy(&update, &sign(&rogue, &update.signed_payload()));
    c.check(
        "unauthorized_policy_update_refused",
        matches!(refused, Err(LedgerError::Unauthorized)),
        format!("{:?}", refused.err()),
    );
    let sig = sign(&sim.updater, &update.signed_payload());
    sim.ledger.update_policy(&update, &sig).map_err(internal)?;
    let rejected = sim.ledger.reevaluate_nodes(&sim.storage);
    sim.run_to_end();

    let sev_keys = [key(sim, "sev-0")?, key(sim, "sev-1")?];
    let sev_rejected = sev_keys
        .iter()
        .all(|k| sim.status_of(k) == Some(AttestationStatus::Rejected) && rejected.contains(k));
    c.check(
        "community_reject_overrides_vendor_accept",
        sev_rejected,
        format!("{} records rejected on re-evaluation", rejected.len()),
    );
    let (ok, detail) = all_verified(sim, &["tdx-0", "tdx-1"])?;
    c.check("other_platform_unaffected", ok, detail);
    never_verified(sim, c, "sev-late", "late_registration_rejected")?;
    let quinn = sim.client("quinn")?;
    c.check(
        "no_input_reaches_rejected_platform",
        quinn.jobs.is_empty() && quinn.failures.iter().any(|f| f.kind == "NoVerifiedNode"),
        format!("{} submissions", quinn.jobs.len()),
    );
    check_results(sim, c, "olga")?;
    check_results(sim, c, "pete")?;

    let big = generated_policy(1000);
    let bytes = big.serialize();
    let round_trip = PolicySet::deserialize(&bytes).is_ok_and(|p| p == big);
    c.check(
        "policy_of_1000_measurements_within_budget",
        big.len() == 1000 && bytes.len() <= POLICY_BUDGET && round_trip,
        format!("{} bytes, budget {POLICY_BUDGET}", bytes.len()),
    );
    Ok(())
}

pub const UNIFORMITY_JOBS: usize = 10_000;
pub const UNIFORMITY_ALPHA: f64 = 0.01;

/// Pearson statistic and p-value for uniform counts.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat = counts
        .iter()
        .map(|&n| (n as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("at least two cells");
    (stat, 1.0 - dist.cdf(stat))
}

fn assignment_uniformity(sim: &mut Sim, c: &mut Checks) -> Result<(), SimError> {
    let mut client = Client::new(
        &derive(&sim.seed, "uniformity-client", &[]),
        sim.config.simulation.cache_ttl,
        sim.config.defenses,
    );
    for _ in 0..UNIFORMITY_JOBS {
        client
            .submit_user_attested(&mut sim.ledger, PlatformKind::SimTdx)
            .map_err(internal)?;
    }
    sim.run_to_end();
    let mut counts: BTreeMap<KeyId, usize> = sim
        .ledger
        .eligible_nodes(PlatformKind::SimTdx)
        .iter()
        .map(|r| (r.key_id, 0))
        .collect();
    let mut stray = 0;
    for (_, b) in bodies(sim) {
        if let EventBody::JobAssigned { route, .. } = b {
            match counts.get_mut(&route[0].key_id) {
                Some(n) => *n += 1,
                None => stray += 1,
            }
        }
    }
    let total: usize = counts.values().sum();
    c.check(
        "every_job_assigned_to_an_eligible_node",
        stray == 0 && total == UNIFORMITY_JOBS && counts.len() == sim.nodes.len(),
        format!("{total} assignments over {} nodes, {stray} stray", counts.len()),
    );
    let cells: Vec<usize> = counts.values().copied().collect();
    if cells.len() < 2 {
        c.check("assignment_uniform_chi_square", false, "fewer than two eligible nodes");
        return Ok(());
    }
    let (stat, p) = chi_square_uniform(&cells);
    c.check(
        "assignment_uniform_chi_square",
        p > UNIFORMITY_ALPHA,
        format!("chi2 {stat:.3}, df {}, p {p:.4}, counts {cells:?}", cells.len() - 1),
    );
    Ok(())
}
