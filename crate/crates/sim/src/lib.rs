// SPDX-License-Identifier: Apache-2.0

//! Scenario harness for confidant: builds a world of enclaves, clients, a
//! committee and a ledger from a config, drives it tick by tick, and
//! grades each named scenario with a list of pass/fail assertions.

pub mod config;
pub mod conformance;
pub mod harness;
pub mod oracle;
pub mod scenarios;

use std::fmt;
use std::path::{Path, PathBuf};

use confidant_core::ledger::{from_jsonl, validate_transcript, ReplayReport};
use serde::Serialize;
use thiserror::Error;

pub use config::{parse_seed, SimConfig};
pub use harness::Sim;
pub use scenarios::{find_scenario, run_scenario, ScenarioDef, SCENARIOS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("malformed transcript: {0}")]
    MalformedTranscript(String),
    #[error("no scenario covers mechanism {0:?}")]
    MissingCoverage(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub scenario: String,
    pub seed: String,
    pub height: u64,
    pub events: usize,
    pub assertions: Vec<Assertion>,
    pub oracle: oracle::OracleReport,
    #[serde(skip)]
    pub transcript: Option<PathBuf>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.passed)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {} seed {} height {} events {}",
            self.scenario, self.seed, self.height, self.events
        )?;
        for a in &self.assertions {
            let mark = if a.passed { "PASS" } else { "FAIL" };
            if a.detail.is_empty() {
                writeln!(f, "  {mark}  {}", a.name)?;
            } else {
                writeln!(f, "  {mark}  {}  ({})", a.name, a.detail)?;
            }
        }
        write!(f, "{}", if self.passed() { "PASSED" } else { "FAILED" })
    }
}

/// Collects named assertions for one scenario run.
#[derive(Default)]
pub struct Checks(Vec<Assertion>);

impl Checks {
    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> bool {
        self.0.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
        passed
    }

    pub fn into_inner(self) -> Vec<Assertion> {
        self.0
    }
}

/// Re-validates a JSON-lines transcript file against the ledger's state
/// machine rules.
pub fn replay_transcript(path: &Path) -> Result<ReplayReport, SimError> {
    let text = std::fs::read_to_string(path)?;
    replay_text(&text)
}

pub fn replay_text(text: &str) -> Result<ReplayReport, SimError> {
    let events = from_jsonl(text).map_err(|e| SimError::MalformedTranscript(e.to_string()))?;
    Ok(validate_transcript(&events))
}
