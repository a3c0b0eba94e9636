// SPDX-License-Identifier: Apache-2.0

//! Confidential compute marketplace core: sealed envelopes, simulated TEEs,
//! a layered measurement policy, an attestation committee, and a ledger
//! contract that routes encrypted jobs to attested nodes.

pub mod atls;
pub mod client;
pub mod committee;
pub mod crypto;
pub mod ledger;
pub mod policy;
pub mod runtime;
pub mod storage;
pub mod tee;
pub mod wire;

use serde::{Deserialize, Serialize};

/// Protocol defenses that the scenario harness can switch off one at a
/// time to show which attack each one stops.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Defenses {
    /// User-attested jobs may not execute before the client confirms.
    pub confirmation_gate: bool,
    /// A community reject entry beats any accept entry.
    pub community_override: bool,
    /// Clients re-verify a record's report before sealing to it.
    pub client_reverify: bool,
}

impl Default for Defenses {
    fn default() -> Self {
        Defenses {
            confirmation_gate: true,
            community_override: true,
            client_reverify: true,
        }
    }
}
