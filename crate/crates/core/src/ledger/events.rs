// SPDX-License-Identifier: Apache-2.0

//! Ledger events and the JSON-lines transcript format.
//!
//! Each line is `{"height":H,"kind":"Kind","body":"<hex>"}` with fields in
//! that order. The body is the canonical wire encoding of the matching
//! [`EventBody`] variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttestationMode, AttestationStatus, JobPayload};
use crate::committee::CommitteeVerdict;
use crate::crypto::{decode_digest, Digest, JobId, KeyId, NodeId, PublicKey};
use crate::tee::PlatformKind;
use crate::wire::{Decoder, Encoder, WireError};

macro_rules! event_kinds {
    ($($name:ident = $code:literal),* $(,)?) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
        pub enum EventKind {
            $($name),*
        }

        impl EventKind {
            pub const ALL: &'static [EventKind] = &[$(EventKind::$name),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(EventKind::$name => stringify!($name)),*
                }
            }

            pub fn code(self) -> u8 {
                match self {
                    $(EventKind::$name => $code),*
                }
            }
        }

        impl FromStr for EventKind {
            type Err = TranscriptError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $(stringify!($name) => Ok(EventKind::$name),)*
                    other => Err(TranscriptError::UnknownKind(other.to_string())),
                }
            }
        }
    };
}

event_kinds! {
    NodeRegistered = 1,
    NodeStatusChanged = 2,
    CommitteeAgreement = 3,
    KeyRevoked = 4,
    PolicyUpdated = 5,
    JobSubmitted = 6,
    JobAssigned = 7,
    AttestationConfirmed = 8,
    JobExecuting = 9,
    LayerForwarded = 10,
    JobCompleted = 11,
    JobFailed = 12,
    JobExpired = 13,
    NodeExcluded = 14,
    HeightSealed = 15,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LedgerEvent {
    pub height: u64,
    pub kind: EventKind,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("unknown event kind {0:?}")]
    UnknownKind(String),
    #[error("body does not decode: {0}")]
    Body(#[from] WireError),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RouteHop {
    pub key_id: KeyId,
    pub node_id: NodeId,
}

/// Decoded event bodies.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum EventBody {
    NodeRegistered {
        node_id: NodeId,
        key_id: KeyId,
        public_key: PublicKey,
        platform: PlatformKind,
        epoch: u64,
        status: AttestationStatus,
        reason: String,
        report_digest: Digest,
        direct: bool,
    },
    NodeStatusChanged {
        key_id: KeyId,
        status: AttestationStatus,
        reason: String,
    },
    CommitteeAgreement {
        key_id: KeyId,
        report_digest: Digest,
        verdict: CommitteeVerdict,
        signers: Vec<KeyId>,
    },
    KeyRevoked {
        key_id: KeyId,
        reason: String,
    },
    PolicyUpdated {
        version: u64,
        delta: Vec<u8>,
    },
    JobSubmitted {
        job_id: JobId,
        client_key: PublicKey,
        mode: AttestationMode,
        platforms: Vec<PlatformKind>,
        targets: Vec<KeyId>,
        excluded: Vec<KeyId>,
        payload: Option<JobPayload>,
        deadline: u64,
        requeued_from: Option<JobId>,
    },
    JobAssigned {
        job_id: JobId,
        route: Vec<RouteHop>,
    },
    AttestationConfirmed {
        job_id: JobId,
        report_digest: Digest,
    },
    JobExecuting {
        job_id: JobId,
        key_id: KeyId,
    },
    LayerForwarded {
        job_id: JobId,
        key_id: KeyId,
        layer: u32,
        payload: JobPayload,
    },
    JobCompleted {
        job_id: JobId,
        key_id: KeyId,
        result: JobPayload,
    },
    JobFailed {
        job_id: JobId,
        key_id: KeyId,
        reason: String,
    },
    JobExpired {
        job_id: JobId,
    },
    NodeExcluded {
        job_id: JobId,
        key_id: KeyId,
        evidence: Digest,
    },
    HeightSealed {
        height: u64,
    },
}

fn encode_digests(enc: &mut Encoder, ds: &[Digest]) {
    enc.u32(ds.len() as u32);
    for d in ds {
        enc.bytes(d.as_bytes());
    }
}

fn decode_digests(dec: &mut Decoder<'_>) -> Result<Vec<Digest>, WireError> {
    let n = dec.u32()?;
    (0..n).map(|_| decode_digest(dec)).collect()
}

fn encode_opt_digest(enc: &mut Encoder, d: &Option<Digest>) {
    match d {
        Some(d) => enc.u8(1).bytes(d.as_bytes()),
        None => enc.u8(0),
    };
}

fn decode_opt_digest(dec: &mut Decoder<'_>) -> Result<Option<Digest>, WireError> {
    match dec.u8()? {
        0 => Ok(None),
        1 => Ok(Some(decode_digest(dec)?)),
        other => Err(WireError::invalid("option tag", other.to_string())),
    }
}

fn decode_public_key(dec: &mut Decoder<'_>) -> Result<PublicKey, WireError> {
    PublicKey::from_bytes(dec.bytes()?).map_err(|e| WireError::invalid("public key", e.to_string()))
}

fn encode_opt_payload(enc: &mut Encoder, p: &Option<JobPayload>) {
    match p {
        None => {
            enc.u8(0);
        }
        Some(p) => p.encode(enc),
    }
}

fn decode_opt_payload(dec: &mut Decoder<'_>) -> Result<Option<JobPayload>, WireError> {
    let mut peek = dec.clone();
    if peek.u8()? == 0 {
        *dec = peek;
        return Ok(None);
    }
    Ok(Some(JobPayload::decode(dec)?))
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::NodeRegistered { .. } => EventKind::NodeRegistered,
            EventBody::NodeStatusChanged { .. } => EventKind::NodeStatusChanged,
            EventBody::CommitteeAgreement { .. } => EventKind::CommitteeAgreement,
            EventBody::KeyRevoked { .. } => EventKind::KeyRevoked,
            EventBody::PolicyUpdated { .. } => EventKind::PolicyUpdated,
            EventBody::JobSubmitted { .. } => EventKind::JobSubmitted,
            EventBody::JobAssigned { .. } => EventKind::JobAssigned,
            EventBody::AttestationConfirmed { .. } => EventKind::AttestationConfirmed,
            EventBody::JobExecuting { .. } => EventKind::JobExecuting,
            EventBody::LayerForwarded { .. } => EventKind::LayerForwarded,
            EventBody::JobCompleted { .. } => EventKind::JobCompleted,
            EventBody::JobFailed { .. } => EventKind::JobFailed,
            EventBody::JobExpired { .. } => EventKind::JobExpired,
            EventBody::NodeExcluded { .. } => EventKind::NodeExcluded,
            EventBody::HeightSealed { .. } => EventKind::HeightSealed,
        }
    }

    pub fn job_id(&self) -> Option<JobId> {
        match self {
            EventBody::JobSubmitted { job_id, .. }
            | EventBody::JobAssigned { job_id, .. }
            | EventBody::AttestationConfirmed { job_id, .. }
            | EventBody::JobExecuting { job_id, .. }
            | EventBody::LayerForwarded { job_id, .. }
            | EventBody::JobCompleted { job_id, .. }
            | EventBody::JobFailed { job_id, .. }
            | EventBody::JobExpired { job_id }
            | EventBody::NodeExcluded { job_id, .. } => Some(*job_id),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        match self {
            EventBody::NodeRegistered {
                node_id,
                key_id,
                public_key,
                platform,
                epoch,
                status,
                reason,
                report_digest,
                direct,
            } => {
                enc.bytes(node_id.as_bytes()).bytes(key_id.as_bytes());
                public_key.encode(&mut enc);
                enc.u8(platform.code())
                    .u64(*epoch)
                    .u8(status.code())
                    .str(reason)
                    .bytes(report_digest.as_bytes())
                    .bool(*direct);
            }
            EventBody::NodeStatusChanged { key_id, status, reason } => {
                enc.bytes(key_id.as_bytes()).u8(status.code()).str(reason);
            }
            EventBody::CommitteeAgreement {
                key_id,
                report_digest,
                verdict,
                signers,
            } => {
                enc.bytes(key_id.as_bytes())
                    .bytes(report_digest.as_bytes())
                    .u8(verdict.code());
                encode_digests(&mut enc, signers);
            }
            EventBody::KeyRevoked { key_id, reason } => {
                enc.bytes(key_id.as_bytes()).str(reason);
            }
            EventBody::PolicyUpdated { version, delta } => {
                enc.u64(*version).bytes(delta);
            }
            EventBody::JobSubmitted {
                job_id,
                client_key,
                mode,
                platforms,
                targets,
                excluded,
                payload,
                deadline,
                requeued_from,
            } => {
                enc.bytes(job_id.as_bytes());
                client_key.encode(&mut enc);
                enc.u8(mode.code()).u32(platforms.len() as u32);
                for p in platforms {
                    enc.u8(p.code());
                }
                encode_digests(&mut enc, targets);
                encode_digests(&mut enc, excluded);
                encode_opt_payload(&mut enc, payload);
                enc.u64(*deadline);
                encode_opt_digest(&mut enc, requeued_from);
            }
            EventBody::JobAssigned { job_id, route } => {
                enc.bytes(job_id.as_bytes()).u32(route.len() as u32);
                for hop in route {
                    enc.bytes(hop.key_id.as_bytes()).bytes(hop.node_id.as_bytes());
                }
            }
            EventBody::AttestationConfirmed { job_id, report_digest } => {
                enc.bytes(job_id.as_bytes()).bytes(report_digest.as_bytes());
            }
            EventBody::JobExecuting { job_id, key_id } => {
                enc.bytes(job_id.as_bytes()).bytes(key_id.as_bytes());
            }
            EventBody::LayerForwarded {
                job_id,
                key_id,
                layer,
                payload,
            } => {
                enc.bytes(job_id.as_bytes()).bytes(key_id.as_bytes()).u32(*layer);
                payload.encode(&mut enc);
            }
            EventBody::JobCompleted { job_id, key_id, result } => {
                enc.bytes(job_id.as_bytes()).bytes(key_id.as_bytes());
                result.encode(&mut enc);
            }
            EventBody::JobFailed { job_id, key_id, reason } => {
                enc.bytes(job_id.as_bytes()).bytes(key_id.as_bytes()).str(reason);
            }
            EventBody::JobExpired { job_id } => {
                enc.bytes(job_id.as_bytes());
            }
            EventBody::NodeExcluded {
                job_id,
                key_id,
                evidence,
            } => {
                enc.bytes(job_id.as_bytes())
                    .bytes(key_id.as_bytes())
                    .bytes(evidence.as_bytes());
            }
            EventBody::HeightSealed { height } => {
                enc.u64(*height);
            }
        }
        enc.finish()
    }

    pub fn decode(kind: EventKind, body: &[u8]) -> Result<Self, WireError> {
        let mut dec = Decoder::new(body);
        let d = &mut dec;
        let out = match kind {
            EventKind::NodeRegistered => EventBody::NodeRegistered {
                node_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
                public_key: decode_public_key(d)?,
                platform: PlatformKind::from_code(d.u8()?)?,
                epoch: d.u64()?,
                status: AttestationStatus::from_code(d.u8()?)?,
                reason: d.string()?,
                report_digest: decode_digest(d)?,
                direct: d.bool()?,
            },
            EventKind::NodeStatusChanged => EventBody::NodeStatusChanged {
                key_id: decode_digest(d)?,
                status: AttestationStatus::from_code(d.u8()?)?,
                reason: d.string()?,
            },
            EventKind::CommitteeAgreement => EventBody::CommitteeAgreement {
                key_id: decode_digest(d)?,
                report_digest: decode_digest(d)?,
                verdict: CommitteeVerdict::from_code(d.u8()?)?,
                signers: decode_digests(d)?,
            },
            EventKind::KeyRevoked => EventBody::KeyRevoked {
                key_id: decode_digest(d)?,
                reason: d.string()?,
            },
            EventKind::PolicyUpdated => EventBody::PolicyUpdated {
                version: d.u64()?,
                delta: d.bytes()?.to_vec(),
            },
            EventKind::JobSubmitted => {
                let job_id = decode_digest(d)?;
                let client_key = decode_public_key(d)?;
                let mode = AttestationMode::from_code(d.u8()?)?;
                let n = d.u32()?;
                let platforms = (0..n)
                    .map(|_| PlatformKind::from_code(d.u8()?))
                    .collect::<Result<_, _>>()?;
                EventBody::JobSubmitted {
                    job_id,
                    client_key,
                    mode,
                    platforms,
                    targets: decode_digests(d)?,
                    excluded: decode_digests(d)?,
                    payload: decode_opt_payload(d)?,
                    deadline: d.u64()?,
                    requeued_from: decode_opt_digest(d)?,
                }
            }
            EventKind::JobAssigned => {
                let job_id = decode_digest(d)?;
                let n = d.u32()?;
                let route = (0..n)
                    .map(|_| {
                        Ok(RouteHop {
                            key_id: decode_digest(d)?,
                            node_id: decode_digest(d)?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                EventBody::JobAssigned { job_id, route }
            }
            EventKind::AttestationConfirmed => EventBody::AttestationConfirmed {
                job_id: decode_digest(d)?,
                report_digest: decode_digest(d)?,
            },
            EventKind::JobExecuting => EventBody::JobExecuting {
                job_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
            },
            EventKind::LayerForwarded => EventBody::LayerForwarded {
                job_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
                layer: d.u32()?,
                payload: JobPayload::decode(d)?,
            },
            EventKind::JobCompleted => EventBody::JobCompleted {
                job_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
                result: JobPayload::decode(d)?,
            },
            EventKind::JobFailed => EventBody::JobFailed {
                job_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
                reason: d.string()?,
            },
            EventKind::JobExpired => EventBody::JobExpired {
                job_id: decode_digest(d)?,
            },
            EventKind::NodeExcluded => EventBody::NodeExcluded {
                job_id: decode_digest(d)?,
                key_id: decode_digest(d)?,
                evidence: decode_digest(d)?,
            },
            EventKind::HeightSealed => EventBody::HeightSealed { height: d.u64()? },
        };
        dec.finish()?;
        Ok(out)
    }
}

impl LedgerEvent {
    pub fn decode_body(&self) -> Result<EventBody, WireError> {
        EventBody::decode(self.kind, &self.body)
    }
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    height: u64,
    kind: String,
    body: String,
}

/// One JSON object per event, each line terminated by `\n`.
pub fn to_jsonl(events: &[LedgerEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let line = EventLine {
            height: e.height,
            kind: e.kind.as_str().to_string(),
            body: hex::encode(&e.body),
        };
        out.push_str(&serde_json::to_string(&line).expect("event line serializes"));
        out.push('\n');
    }
    out
}

/// Parses a transcript written by [`to_jsonl`]. Every line must be
/// newline-terminated and every body must decode for its kind.
pub fn from_jsonl(text: &str) -> Result<Vec<LedgerEvent>, TranscriptError> {
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(TranscriptError::Malformed {
            line,
            detail: "final line not newline-terminated (truncated?)".into(),
        });
    }
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let malformed = |detail: String| TranscriptError::Malformed { line, detail };
        let parsed: EventLine = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        let kind = EventKind::from_str(&parsed.kind).map_err(|e| malformed(e.to_string()))?;
        let body = hex::decode(&parsed.body).map_err(|e| malformed(e.to_string()))?;
        EventBody::decode(kind, &body).map_err(|e| malformed(format!("{kind} body: {e}")))?;
        events.push(LedgerEvent {
            height: parsed.height,
            kind,
            body,
        });
    }
    Ok(events)
}
