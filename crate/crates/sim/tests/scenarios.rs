// SPDX-License-Identifier: Apache-2.0

use confidant_sim::scenarios::{find_scenario, run_scenario, SCENARIOS};
use confidant_sim::{replay_text, SimError};

fn transcript(name: &str, seed: u8) -> String {
    let dir = tempfile::tempdir().unwrap();
    run_scenario(name, None, &[seed; 32], Some(dir.path())).unwrap();
    std::fs::read_to_string(dir.path().join(format!("{name}.jsonl"))).unwrap()
}

#[test]
fn every_scenario_passes_across_seeds() {
    for seed in 1u8..=3 {
        for s in SCENARIOS {
            let v = run_scenario(s.name, None, &[seed; 32], None).unwrap();
            assert!(v.passed(), "seed {seed}\n{v}");
        }
    }
}

#[test]
fn valid_transcript_replays_clean() {
    let text = transcript("nominal_user_attested", 0);
    let report = replay_text(&text).unwrap();
    assert!(report.is_clean(), "{:?}", report.violations);
    assert!(report.completed > 0);
}

#[test]
fn truncated_transcript_is_malformed() {
    let text = transcript("nominal_onchain", 0);
    let cut = text.len() - 5;
    assert!(matches!(
        replay_text(&text[..cut]),
        Err(SimError::MalformedTranscript(_))
    ));
    let garbage = format!("{text}{{\"height\":1,\"kind\":\"JobAssigned\",\"body\":\"zz\"}}\n");
    assert!(matches!(replay_text(&garbage), Err(SimError::MalformedTranscript(_))));
}

#[test]
fn spliced_transcript_has_violations() {
    let a = transcript("nominal_onchain", 0);
    let b = transcript("nominal_onchain", 1);
    let a_lines: Vec<&str> = a.lines().collect();
    let b_lines: Vec<&str> = b.lines().collect();
    let half = a_lines.len() / 2;
    let spliced: String = a_lines[..half]
        .iter()
        .chain(&b_lines[b_lines.len() / 2..])
        .map(|l| format!("{l}\n"))
        .collect();
    let report = replay_text(&spliced).unwrap();
    assert!(!report.is_clean());
}

#[test]
fn forged_results_fail_nominal_onchain() {
    let mut cfg = find_scenario("nominal_onchain").unwrap().default_config();
    for n in &mut cfg.nodes {
        n.malice.forge_result = true;
    }
    let v = run_scenario("nominal_onchain", Some(cfg), &[0; 32], None).unwrap();
    assert!(!v.passed());
    assert!(v.failed().any(|a| a.name.ends_with("_results_match_workload")), "{v}");
}

#[test]
fn dishonest_committee_quorum_fails_forged_report_committee() {
    let mut cfg = find_scenario("forged_report_committee").unwrap().default_config();
    cfg.simulation.dishonest_members = cfg.simulation.committee_threshold;
    let v = run_scenario("forged_report_committee", Some(cfg), &[0; 32], None).unwrap();
    assert!(!v.passed(), "{v}");
}

#[test]
fn config_for_another_scenario_is_refused() {
    let cfg = find_scenario("nominal_onchain").unwrap().default_config();
    assert!(matches!(
        run_scenario("bailout_user", Some(cfg), &[0; 32], None),
        Err(SimError::ConfigInvalid(_))
    ));
    assert!(matches!(
        run_scenario("nope", None, &[0; 32], None),
        Err(SimError::UnknownScenario(_))
    ));
}
