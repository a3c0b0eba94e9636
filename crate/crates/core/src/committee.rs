// SPDX-License-Identifier: Apache-2.0

//! Committee verification of attestation reports posted to storage.
//!
//! Members check a report independently and sign `(report digest, verdict)`.
//! An agreement is the deduplicated list of signatures behind one verdict;
//! it stands for an aggregate signature and is valid when at least
//! `threshold` distinct roster members signed it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, digest_parts, generate_keypair, Digest, KeyId, KeyPair, PublicKey, Signature};
use crate::ledger::{AttestationStatus, Ledger, LedgerError, NodeRecord, ReportLocation};
use crate::policy::PolicySet;
use crate::storage::ContentStore;
use crate::tee::{verify_report, AttestationReport, PlatformRoots};
use crate::wire::WireError;

pub const DEFAULT_COMMITTEE_SIZE: usize = 5;
pub const DEFAULT_THRESHOLD: usize = 3;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum CommitteeVerdict {
    Accept,
    Reject,
}

impl CommitteeVerdict {
    pub fn code(self) -> u8 {
        match self {
            CommitteeVerdict::Accept => 1,
            CommitteeVerdict::Reject => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1 => Ok(CommitteeVerdict::Accept),
            2 => Ok(CommitteeVerdict::Reject),
            other => Err(WireError::invalid("verdict", other.to_string())),
        }
    }
}

/// Bytes a member signs for a verdict.
pub fn verdict_payload(report_digest: &Digest, verdict: CommitteeVerdict) -> Vec<u8> {
    let mut out = b"confidant/committee-verdict/v1".to_vec();
    out.extend_from_slice(report_digest.as_bytes());
    out.push(verdict.code());
    out
}

#[derive(Clone, Debug)]
pub struct CommitteeMember {
    member_id: KeyId,
    keypair: KeyPair,
    honest: bool,
    /// What a dishonest member signs regardless of the evidence.
    forced_verdict: CommitteeVerdict,
}

impl CommitteeMember {
    pub fn honest(seed: &[u8; 32]) -> Self {
        Self::build(seed, true, CommitteeVerdict::Accept)
    }

    pub fn dishonest(seed: &[u8; 32], forced_verdict: CommitteeVerdict) -> Self {
        Self::build(seed, false, forced_verdict)
    }

    fn build(seed: &[u8; 32], honest: bool, forced_verdict: CommitteeVerdict) -> Self {
        let keypair = generate_keypair(&digest_parts(&[b"confidant/committee-member", seed]).0);
        CommitteeMember {
            member_id: keypair.key_id(),
            keypair,
            honest,
            forced_verdict,
        }
    }

    pub fn member_id(&self) -> KeyId {
        self.member_id
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public_key()
    }

    pub fn is_honest(&self) -> bool {
        self.honest
    }
}

/// Registered committee members, by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommitteeRoster {
    members: BTreeMap<KeyId, PublicKey>,
}

impl CommitteeRoster {
    pub fn new<'a>(keys: impl IntoIterator<Item = &'a PublicKey>) -> Self {
        CommitteeRoster {
            members: keys.into_iter().map(|k| (k.key_id(), *k)).collect(),
        }
    }

    pub fn from_members(members: &[CommitteeMember]) -> Self {
        Self::new(members.iter().map(|m| m.public_key()))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: &KeyId) -> Option<&PublicKey> {
        self.members.get(id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedVerdict {
    pub member_id: KeyId,
    pub report_digest: Digest,
    pub verdict: CommitteeVerdict,
    pub signature: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitteeAgreement {
    pub report_digest: Digest,
    pub verdict: CommitteeVerdict,
    pub signatures: Vec<Signature>,
    pub threshold: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitteeError {
    #[error("no verdict reached the threshold of {threshold} (accept {accept}, reject {reject})")]
    NoQuorum {
        threshold: usize,
        accept: usize,
        reject: usize,
    },
    #[error("verdicts reference different reports")]
    MixedDigests,
}

/// An honest member accepts iff the root signature verifies, the report
/// binds `public_key`, and the policy accepts the measurements.
pub fn member_verify(
    member: &CommitteeMember,
    report: &AttestationReport,
    public_key: &PublicKey,
    policy: &PolicySet,
    roots: &PlatformRoots,
) -> SignedVerdict {
    let verdict = if member.honest {
        match verify_report(report, public_key, policy, roots, true) {
            Ok(()) => CommitteeVerdict::Accept,
            Err(_) => CommitteeVerdict::Reject,
        }
    } else {
        member.forced_verdict
    };
    let report_digest = report.digest();
    SignedVerdict {
        member_id: member.member_id,
        report_digest,
        verdict,
        signature: crypto::sign(&member.keypair, &verdict_payload(&report_digest, verdict)),
    }
}

/// Signatures over `(report_digest, verdict)` from distinct roster members
/// that verify. Duplicates and unknown signers are dropped.
pub fn valid_signers(
    report_digest: &Digest,
    verdict: CommitteeVerdict,
    signatures: &[Signature],
    roster: &CommitteeRoster,
) -> Vec<KeyId> {
    let payload = verdict_payload(report_digest, verdict);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for sig in signatures {
        let Some(pk) = roster.get(&sig.signer_key_id) else {
            continue;
        };
        if seen.contains(&sig.signer_key_id) {
            continue;
        }
        if crypto::verify(sig, pk, &payload).is_ok() {
            seen.insert(sig.signer_key_id);
            out.push(sig.signer_key_id);
        }
    }
    out
}

pub fn aggregate(
    verdicts: &[SignedVerdict],
    roster: &CommitteeRoster,
    threshold: usize,
) -> Result<CommitteeAgreement, CommitteeError> {
    let Some(first) = verdicts.first() else {
        return Err(CommitteeError::NoQuorum {
            threshold,
            accept: 0,
            reject: 0,
        });
    };
    let report_digest = first.report_digest;
    if verdicts.iter().any(|v| v.report_digest != report_digest) {
        return Err(CommitteeError::MixedDigests);
    }
    let collect = |verdict: CommitteeVerdict| -> Vec<Signature> {
        let sigs: Vec<Signature> = verdicts
            .iter()
            .filter(|v| v.verdict == verdict && v.member_id == v.signature.signer_key_id)
            .map(|v| v.signature.clone())
            .collect();
        let valid = valid_signers(&report_digest, verdict, &sigs, roster);
        valid
            .into_iter()
            .map(|id| {
                sigs.iter()
                    .find(|s| s.signer_key_id == id)
                    .expect("signer came from this list")
                    .clone()
            })
            .collect()
    };
    let accept = collect(CommitteeVerdict::Accept);
    let reject = collect(CommitteeVerdict::Reject);
    let (verdict, signatures) = match (accept.len() >= threshold, reject.len() >= threshold) {
        (true, false) => (CommitteeVerdict::Accept, accept),
        (false, true) => (CommitteeVerdict::Reject, reject),
        _ => {
            return Err(CommitteeError::NoQuorum {
                threshold,
                accept: accept.len(),
                reject: reject.len(),
            })
        }
    };
    Ok(CommitteeAgreement {
        report_digest,
        verdict,
        signatures,
        threshold,
    })
}

/// Posts an agreement for the Pending record `key_id`. The ledger recounts
/// signatures against its own roster and threshold.
pub fn submit_agreement(
    ledger: &mut Ledger,
    key_id: &KeyId,
    agreement: &CommitteeAgreement,
) -> Result<NodeRecord, LedgerError> {
    ledger.submit_agreement(key_id, agreement)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PendingError {
    #[error("key {0:?} has no pending stored report")]
    NotPending(KeyId),
    #[error("report unavailable: {0}")]
    Report(String),
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Runs the whole committee over the Pending record `key_id`: each member
/// fetches the stored report and votes, the votes are aggregated at the
/// ledger's threshold, and the agreement is posted.
pub fn verify_pending(
    ledger: &mut Ledger,
    storage: &ContentStore,
    members: &[CommitteeMember],
    key_id: &KeyId,
) -> Result<NodeRecord, PendingError> {
    let record = ledger
        .node(key_id)
        .filter(|r| r.attestation_status == AttestationStatus::Pending)
        .ok_or(PendingError::NotPending(*key_id))?;
    let ReportLocation::Stored(r) = &record.report else {
        return Err(PendingError::NotPending(*key_id));
    };
    let bytes = storage.get(r).map_err(|e| PendingError::Report(e.to_string()))?;
    let report = AttestationReport::from_bytes(&bytes).map_err(|e| PendingError::Report(e.to_string()))?;
    let public_key = record.public_key;
    let votes: Vec<SignedVerdict> = members
        .iter()
        .map(|m| member_verify(m, &report, &public_key, ledger.policy(), ledger.roots()))
        .collect();
    let agreement = aggregate(&votes, ledger.committee(), ledger.config().committee_threshold)?;
    Ok(ledger.submit_agreement(key_id, &agreement)?)
}
