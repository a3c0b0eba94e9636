// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration, read from TOML.
//!
//! ```toml
//! [simulation]
//! max_ticks = 12
//! committee_size = 5
//! committee_threshold = 3
//! dishonest_members = 0
//! cache_ttl = 50
//! inline_limit = 4096
//! deadline = 100
//!
//! [defenses]
//! confirmation_gate = true
//! community_override = true
//! client_reverify = true
//!
//! [[nodes]]
//! name = "sev-0"
//! platform = "SimSev"
//! path = "committee"
//! faults = ["LeakEnclaveKey", { TamperedMeasurement = "Firmware" }]
//!
//! [[clients]]
//! name = "alice"
//! mode = "onchain"
//! platforms = ["SimSev", "SimTdx"]
//! jobs = 2
//! ```

use std::collections::BTreeSet;

use confidant_core::runtime::{Malice, RegistrationPath};
use confidant_core::tee::{Fault, PlatformKind};
use confidant_core::Defenses;
use serde::{Deserialize, Serialize};

use crate::SimError;

pub const APPROVED_IMAGE: &str = "confidant-approved-image";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub simulation: Simulation,
    #[serde(default)]
    pub defenses: Defenses,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Simulation {
    /// If set, must match the scenario being run.
    pub scenario: Option<String>,
    pub max_ticks: u64,
    pub committee_size: usize,
    pub committee_threshold: usize,
    /// The first `dishonest_members` committee members vote Accept on
    /// everything.
    pub dishonest_members: usize,
    pub cache_ttl: u64,
    pub inline_limit: usize,
    pub deadline: u64,
    pub jobs_per_poll: usize,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            scenario: None,
            max_ticks: 12,
            committee_size: 5,
            committee_threshold: 3,
            dishonest_members: 0,
            cache_ttl: 50,
            inline_limit: 4096,
            deadline: 100,
            jobs_per_poll: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub platform: PlatformKind,
    #[serde(default)]
    pub path: RegistrationPath,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub malice: Malice,
    #[serde(default = "approved_image")]
    pub image: String,
    #[serde(default)]
    pub register_at: u64,
    /// Heights at which the node resets its enclave and re-registers.
    #[serde(default)]
    pub rotate_at: Vec<u64>,
    /// Puts a network attacker in front of the node that replays the first
    /// ServerKey frame it sees into every later handshake.
    #[serde(default)]
    pub replay_reports: bool,
}

fn approved_image() -> String {
    APPROVED_IMAGE.to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Onchain,
    UserAttested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    pub mode: ClientMode,
    /// Outermost layer first.
    pub platforms: Vec<PlatformKind>,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub start_at: u64,
    /// Pads each input to at least this many bytes.
    #[serde(default)]
    pub input_size: usize,
    /// Verify the node, then never confirm on the ledger.
    #[serde(default)]
    pub bailout: bool,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let config: SimConfig = toml::from_str(text).map_err(|e| SimError::ConfigInvalid(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        let s = &self.simulation;
        if s.max_ticks == 0 || s.max_ticks > 10_000 {
            return bad(format!("max_ticks {} outside 1..=10000", s.max_ticks));
        }
        if s.committee_size == 0 || s.committee_threshold == 0 || s.committee_threshold > s.committee_size {
            return bad(format!(
                "committee threshold {} of {} members",
                s.committee_threshold, s.committee_size
            ));
        }
        if s.dishonest_members > s.committee_size {
            return bad("more dishonest members than members".into());
        }
        if s.jobs_per_poll == 0 {
            return bad("jobs_per_poll must be positive".into());
        }
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return bad(format!("duplicate actor name {:?}", n.name));
            }
            if n.rotate_at.iter().any(|&h| h <= n.register_at) {
                return bad(format!("node {:?} rotates before it registers", n.name));
            }
        }
        for c in &self.clients {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate actor name {:?}", c.name));
            }
            match (c.mode, c.platforms.len()) {
                (_, 0) => return bad(format!("client {:?} lists no platform", c.name)),
                (ClientMode::UserAttested, n) if n > 1 => {
                    return bad(format!("user-attested client {:?} lists {n} platforms", c.name))
                }
                (ClientMode::Onchain, n) if n > 3 => {
                    return bad(format!("client {:?} lists {n} layers, at most 3", c.name))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Parses a seed of up to 64 hex digits, left-padded with zeros.
pub fn parse_seed(hex_seed: &str) -> Result<[u8; 32], SimError> {
    let s = hex_seed.trim().trim_start_matches("0x");
    if s.is_empty() || s.len() > 64 {
        return Err(SimError::ConfigInvalid(format!(
            "seed must be 1 to 64 hex digits, got {}",
            s.len()
        )));
    }
    let padded = format!("{s:0>64}");
    let bytes = hex::decode(&padded).map_err(|e| SimError::ConfigInvalid(format!("seed: {e}")))?;
    Ok(bytes.try_into().expect("64 hex digits"))
}

pub fn seed_hex(seed: &[u8; 32]) -> String {
    hex::encode(seed)
}
