// SPDX-License-Identifier: Apache-2.0

//! Generated conformance table: each protocol mechanism, the modules that
//! implement it, the scenarios and tests that exercise it, and a status
//! taken from scenario verdicts.

use std::fmt::Write as _;

use crate::{SimError, Verdict};

pub struct Mechanism {
    pub name: &'static str,
    pub modules: &'static [&'static str],
    pub scenarios: &'static [&'static str],
    pub tests: &'static [&'static str],
}

pub const IN_SCOPE: &[Mechanism] = &[
    Mechanism {
        name: "Two attestation approaches: user attestation and on-chain attestation",
        modules: &["ledger", "client", "atls"],
        scenarios: &["nominal_onchain", "nominal_user_attested"],
        tests: &["core/tests/gate_property.rs"],
    },
    Mechanism {
        name: "User attestation over aTLS; notify the chain before any compute",
        modules: &["atls", "client", "runtime", "ledger"],
        scenarios: &["nominal_user_attested", "bailout_user", "stale_report_replay"],
        tests: &["core/tests/gate_property.rs", "core/src/atls.rs"],
    },
    Mechanism {
        name: "On-chain attestation: decentralized key management, asymmetric encryption",
        modules: &["crypto", "client", "ledger"],
        scenarios: &["nominal_onchain", "tampered_measurement"],
        tests: &["core/tests/crypto_roundtrip.rs"],
    },
    Mechanism {
        name: "Node registration: key binding, on-chain publication, revocation",
        modules: &["tee", "ledger"],
        scenarios: &["forged_report_direct", "revoked_key_reuse"],
        tests: &["core/tests/attestation_soundness.rs", "core/tests/rotation.rs"],
    },
    Mechanism {
        name: "User requests and the co-processor loop: polling, storage references",
        modules: &["runtime", "storage", "ledger"],
        scenarios: &["nominal_onchain"],
        tests: &["core/src/runtime.rs", "core/tests/crypto_roundtrip.rs"],
    },
    Mechanism {
        name: "Committee voting on attestation reports with aggregate agreement",
        modules: &["committee", "ledger"],
        scenarios: &["forged_report_committee"],
        tests: &["core/tests/attestation_soundness.rs"],
    },
    Mechanism {
        name: "Three-layer policy and its size budget; CVM rotation and initial-state integrity",
        modules: &["policy", "tee", "runtime"],
        scenarios: &["policy_community_override", "rotation_epoch", "tampered_measurement"],
        tests: &["core/tests/policy_bound.rs", "core/tests/rotation.rs"],
    },
    Mechanism {
        name: "Threat model as fault injection: forged evidence, replay, dual-TEE layering, random selection",
        modules: &["tee", "crypto", "ledger", "oracle"],
        scenarios: &[
            "forged_report_direct",
            "stale_report_replay",
            "single_layer_compromise",
            "assignment_uniformity",
        ],
        tests: &["core/tests/assignment_uniformity.rs", "sim/tests/acceptance.rs"],
    },
];

pub const EXCLUDED: &[(&str, &str)] = &[
    ("Motivation and background prose", "no mechanism to implement"),
    (
        "zkML / zkLLM comparison and its timing figures",
        "cited context from other work, not reproduced",
    ),
    (
        "Real TDX, SEV-SNP and GPU attestation quote formats",
        "evidence is simulated",
    ),
    (
        "Real blockchain integration",
        "the ledger is an in-process state machine",
    ),
    ("Real model inference", "replaced by a deterministic mock workload"),
    (
        "Future work: verifiable inference, private model serving",
        "not specified",
    ),
    ("Side-channel analysis", "no procedure given"),
    ("Differential privacy for training", "mentioned only"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    NotRun,
}

impl Status {
    fn label(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::NotRun => "not run",
        }
    }
}

pub struct Row {
    pub mechanism: &'static Mechanism,
    pub scenarios: Vec<&'static str>,
    pub status: Status,
}

/// Maps each mechanism to the scenarios in `available`. Errors with the
/// first mechanism left without one.
pub fn rows(available: &[&str], verdicts: &[Verdict]) -> Result<Vec<Row>, SimError> {
    IN_SCOPE
        .iter()
        .map(|m| {
            let scenarios: Vec<&'static str> = m.scenarios.iter().copied().filter(|s| available.contains(s)).collect();
            if scenarios.is_empty() {
                return Err(SimError::MissingCoverage(m.name.to_string()));
            }
            let mut status = Status::Pass;
            for s in &scenarios {
                match verdicts.iter().find(|v| v.scenario == *s) {
                    None => status = Status::NotRun,
                    Some(v) if !v.passed() => {
                        status = Status::Fail;
                        break;
                    }
                    Some(_) => {}
                }
            }
            Ok(Row {
                mechanism: m,
                scenarios,
                status,
            })
        })
        .collect()
}

pub fn conformance_report(available: &[&str], verdicts: &[Verdict]) -> Result<String, SimError> {
    let rows = rows(available, verdicts)?;
    let mut out = String::from("# Conformance\n\n");
    out.push_str("| Mechanism | Modules | Scenarios | Tests | Status |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.mechanism.name,
            r.mechanism.modules.join(", "),
            r.scenarios.join(", "),
            r.mechanism.tests.join(", "),
            r.status.label()
        );
    }
    out.push_str("\n## Scenario verdicts\n\n| Scenario | Assertions | Result |\n|---|---|---|\n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "| {} | {}/{} | {} |",
            v.scenario,
            v.assertions.iter().filter(|a| a.passed).count(),
            v.assertions.len(),
            if v.passed() { "pass" } else { "FAIL" }
        );
    }
    out.push_str("\n## Excluded\n\n| Item | Reason |\n|---|---|\n");
    for (item, why) in EXCLUDED {
        let _ = writeln!(out, "| {item} | {why} |");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::SCENARIOS;

    fn all() -> Vec<&'static str> {
        SCENARIOS.iter().map(|s| s.name).collect()
    }

    #[test]
    fn every_mapped_scenario_exists_and_every_scenario_is_mapped() {
        let names = all();
        for m in IN_SCOPE {
            for s in m.scenarios {
                assert!(names.contains(s), "{s}");
            }
        }
        for n in names {
            assert!(IN_SCOPE.iter().any(|m| m.scenarios.contains(&n)), "{n} unmapped");
        }
    }

    #[test]
    fn deleting_the_only_scenario_names_the_orphan() {
        let available: Vec<_> = all().into_iter().filter(|s| *s != "forged_report_committee").collect();
        match rows(&available, &[]) {
            Err(SimError::MissingCoverage(m)) => assert!(m.starts_with("Committee voting")),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn without_verdicts_rows_are_not_run_and_excluded_listed() {
        let report = conformance_report(&all(), &[]).unwrap();
        assert_eq!(report.matches("| not run |").count(), IN_SCOPE.len());
        assert!(report.contains("## Excluded"));
        assert!(report.contains("zkML"));
    }
}
