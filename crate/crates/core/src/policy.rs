// SPDX-License-Identifier: Apache-2.0

//! Three-layer measurement policy.
//!
//! * vendor layer: accepted hardware, firmware, VMM and driver measurements
//! * platform layer: accepted VM images
//! * community layer: rejected measurements of any class, overriding both
//!   accept lists
//!
//! Policies are immutable values. [`PolicySet::apply_update`] returns a new
//! version and leaves the original untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{decode_digest, Digest};
use crate::wire::{Decoder, Encoder, WireError};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum MeasurementClass {
    Hardware,
    Firmware,
    Vmm,
    Drivers,
    VmImage,
}

impl MeasurementClass {
    pub const ALL: [MeasurementClass; 5] = [
        MeasurementClass::Hardware,
        MeasurementClass::Firmware,
        MeasurementClass::Vmm,
        MeasurementClass::Drivers,
        MeasurementClass::VmImage,
    ];

    pub fn is_vendor(self) -> bool {
        !matches!(self, MeasurementClass::VmImage)
    }

    pub fn code(self) -> u8 {
        match self {
            MeasurementClass::Hardware => 1,
            MeasurementClass::Firmware => 2,
            MeasurementClass::Vmm => 3,
            MeasurementClass::Drivers => 4,
            MeasurementClass::VmImage => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Self::ALL
            .into_iter()
            .find(|c| c.code() == code)
            .ok_or_else(|| WireError::invalid("measurement class", format!("code {code}")))
    }
}

impl fmt::Display for MeasurementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One measured digest per component class, as presented in a report.
pub type MeasurementMap = BTreeMap<MeasurementClass, Digest>;

pub const MAX_LABEL_LEN: usize = 64;

/// A policy entry. Identity is `(class, digest)`; the label is audit
/// metadata and does not take part in comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Measurement {
    pub class: MeasurementClass,
    pub digest: Digest,
    #[serde(default)]
    pub label: String,
}

impl Measurement {
    pub fn new(class: MeasurementClass, digest: Digest, label: impl Into<String>) -> Self {
        Measurement {
            class,
            digest,
            label: label.into(),
        }
    }

    fn key(&self) -> (MeasurementClass, Digest) {
        (self.class, self.digest)
    }
}

impl PartialEq for Measurement {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Measurement {}

impl PartialOrd for Measurement {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Measurement {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Reference to a policy entry by identity, used for removals.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct MeasurementRef {
    pub class: MeasurementClass,
    pub digest: Digest,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PolicyLayer {
    Vendor,
    Platform,
    Community,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("measurement class {0} missing from report")]
    MissingClass(MeasurementClass),
    #[error("policy version {proposed} is not newer than {current}")]
    StaleVersion { current: u64, proposed: u64 },
    #[error("{class} measurements do not belong in the {layer:?} layer")]
    WrongLayer {
        class: MeasurementClass,
        layer: PolicyLayer,
    },
    #[error("label longer than {MAX_LABEL_LEN} bytes")]
    LabelTooLong,
    #[error("malformed policy encoding: {0}")]
    Malformed(#[from] WireError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    CommunityOverride { class: MeasurementClass, digest: Digest },
    UnknownMeasurement { class: MeasurementClass, digest: Digest },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::CommunityOverride { class, digest } => {
                write!(f, "CommunityOverride({class} {})", digest.short())
            }
            RejectReason::UnknownMeasurement { class, digest } => {
                write!(f, "UnknownMeasurement({class} {})", digest.short())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum PolicyVerdict {
    Accept,
    Reject(RejectReason),
}

impl PolicyVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, PolicyVerdict::Accept)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PolicySet {
    version: u64,
    vendor_accept: BTreeSet<Measurement>,
    platform_accept: BTreeSet<Measurement>,
    community_reject: BTreeSet<Measurement>,
}

const POLICY_MAGIC: &[u8; 4] = b"CPOL";
const POLICY_FORMAT: u8 = 1;

fn check_layer(layer: PolicyLayer, m: &Measurement) -> Result<(), PolicyError> {
    let ok = match layer {
        PolicyLayer::Vendor => m.class.is_vendor(),
        PolicyLayer::Platform => !m.class.is_vendor(),
        PolicyLayer::Community => true,
    };
    if !ok {
        return Err(PolicyError::WrongLayer { class: m.class, layer });
    }
    if m.label.len() > MAX_LABEL_LEN {
        return Err(PolicyError::LabelTooLong);
    }
    Ok(())
}

impl PolicySet {
    pub fn empty(version: u64) -> Self {
        PolicySet {
            version,
            vendor_accept: BTreeSet::new(),
            platform_accept: BTreeSet::new(),
            community_reject: BTreeSet::new(),
        }
    }

    pub fn from_parts(
        version: u64,
        vendor: impl IntoIterator<Item = Measurement>,
        platform: impl IntoIterator<Item = Measurement>,
        community: impl IntoIterator<Item = Measurement>,
    ) -> Result<Self, PolicyError> {
        let mut p = PolicySet::empty(version);
        for m in vendor {
            p.insert(PolicyLayer::Vendor, m)?;
        }
        for m in platform {
            p.insert(PolicyLayer::Platform, m)?;
        }
        for m in community {
            p.insert(PolicyLayer::Community, m)?;
        }
        Ok(p)
    }

    fn layer_mut(&mut self, layer: PolicyLayer) -> &mut BTreeSet<Measurement> {
        match layer {
            PolicyLayer::Vendor => &mut self.vendor_accept,
            PolicyLayer::Platform => &mut self.platform_accept,
            PolicyLayer::Community => &mut self.community_reject,
        }
    }

    pub fn layer(&self, layer: PolicyLayer) -> &BTreeSet<Measurement> {
        match layer {
            PolicyLayer::Vendor => &self.vendor_accept,
            PolicyLayer::Platform => &self.platform_accept,
            PolicyLayer::Community => &self.community_reject,
        }
    }

    fn insert(&mut self, layer: PolicyLayer, m: Measurement) -> Result<(), PolicyError> {
        check_layer(layer, &m)?;
        self.layer_mut(layer).replace(m);
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn vendor_accept(&self) -> &BTreeSet<Measurement> {
        &self.vendor_accept
    }

    pub fn platform_accept(&self) -> &BTreeSet<Measurement> {
        &self.platform_accept
    }

    pub fn community_reject(&self) -> &BTreeSet<Measurement> {
        &self.community_reject
    }

    pub fn len(&self) -> usize {
        self.vendor_accept.len() + self.platform_accept.len() + self.community_reject.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accepts iff every presented measurement is on its accept list and no
    /// presented digest is on the community reject list.
    pub fn evaluate(&self, measurements: &MeasurementMap) -> Result<PolicyVerdict, PolicyError> {
        self.evaluate_with(measurements, true)
    }

    /// Like [`evaluate`](Self::evaluate), optionally ignoring the community
    /// layer. Only the defence-ablation scenarios turn the override off.
    pub fn evaluate_with(
        &self,
        measurements: &MeasurementMap,
        community_override: bool,
    ) -> Result<PolicyVerdict, PolicyError> {
        for class in MeasurementClass::ALL {
            if !measurements.contains_key(&class) {
                return Err(PolicyError::MissingClass(class));
            }
        }
        if community_override {
            for (&class, &digest) in measurements {
                if self.community_reject.iter().any(|m| m.digest == digest) {
                    return Ok(PolicyVerdict::Reject(RejectReason::CommunityOverride { class, digest }));
                }
            }
        }
        for (&class, &digest) in measurements {
            let list = if class.is_vendor() {
                &self.vendor_accept
            } else {
                &self.platform_accept
            };
            if !list.contains(&Measurement::new(class, digest, "")) {
                return Ok(PolicyVerdict::Reject(RejectReason::UnknownMeasurement {
                    class,
                    digest,
                }));
            }
        }
        Ok(PolicyVerdict::Accept)
    }

    /// Returns the updated policy; `self` is not modified.
    pub fn apply_update(&self, delta: &PolicyDelta, new_version: u64) -> Result<PolicySet, PolicyError> {
        if new_version <= self.version {
            return Err(PolicyError::StaleVersion {
                current: self.version,
                proposed: new_version,
            });
        }
        let mut next = self.clone();
        next.version = new_version;
        for (layer, adds, removes) in delta.layers() {
            for r in removes {
                next.layer_mut(layer).remove(&Measurement::new(r.class, r.digest, ""));
            }
            for m in adds {
                next.insert(layer, m.clone())?;
            }
        }
        Ok(next)
    }

    /// Canonical binary encoding. Entries are grouped by class inside each
    /// layer and sorted by digest.
    pub fn serialize(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.fixed(POLICY_MAGIC).u8(POLICY_FORMAT).u64(self.version);
        for set in [&self.vendor_accept, &self.platform_accept, &self.community_reject] {
            let mut groups: BTreeMap<MeasurementClass, Vec<&Measurement>> = BTreeMap::new();
            for m in set {
                groups.entry(m.class).or_default().push(m);
            }
            enc.u8(groups.len() as u8);
            for (class, entries) in groups {
                enc.u8(class.code()).u32(entries.len() as u32);
                for m in entries {
                    enc.fixed(m.digest.as_bytes())
                        .u8(m.label.len() as u8)
                        .fixed(m.label.as_bytes());
                }
            }
        }
        enc.finish()
    }

    /// Inverse of [`serialize`](Self::serialize). Rejects non-canonical
    /// input (unsorted or duplicated entries, misplaced classes).
    pub fn deserialize(bytes: &[u8]) -> Result<PolicySet, PolicyError> {
        let mut dec = Decoder::new(bytes);
        let magic: [u8; 4] = dec.fixed()?;
        if &magic != POLICY_MAGIC {
            return Err(WireError::invalid("policy magic", hex::encode(magic)).into());
        }
        let format = dec.u8()?;
        if format != POLICY_FORMAT {
            return Err(WireError::invalid("policy format", format.to_string()).into());
        }
        let mut policy = PolicySet::empty(dec.u64()?);
        for layer in [PolicyLayer::Vendor, PolicyLayer::Platform, PolicyLayer::Community] {
            let groups = dec.u8()?;
            let mut prev: Option<(MeasurementClass, Digest)> = None;
            for _ in 0..groups {
                let class = MeasurementClass::from_code(dec.u8()?)?;
                let count = dec.u32()?;
                for _ in 0..count {
                    let digest = Digest(dec.fixed()?);
                    let label_len = dec.u8()? as usize;
                    let mut label = vec![0u8; label_len];
                    for b in label.iter_mut() {
                        *b = dec.u8()?;
                    }
                    let label = String::from_utf8(label).map_err(|e| WireError::invalid("label", e.to_string()))?;
                    let key = (class, digest);
                    if prev.is_some_and(|p| p >= key) {
                        return Err(WireError::invalid("policy", "entries not in canonical order").into());
                    }
                    prev = Some(key);
                    policy.insert(layer, Measurement::new(class, digest, label))?;
                }
            }
        }
        dec.finish()?;
        Ok(policy)
    }
}

/// Additions and removals per layer. Removals are applied first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyDelta {
    pub add_vendor: Vec<Measurement>,
    pub remove_vendor: Vec<MeasurementRef>,
    pub add_platform: Vec<Measurement>,
    pub remove_platform: Vec<MeasurementRef>,
    pub add_community_reject: Vec<Measurement>,
    pub remove_community_reject: Vec<MeasurementRef>,
}

impl PolicyDelta {
    fn layers(&self) -> [(PolicyLayer, &[Measurement], &[MeasurementRef]); 3] {
        [
            (PolicyLayer::Vendor, &self.add_vendor, &self.remove_vendor),
            (PolicyLayer::Platform, &self.add_platform, &self.remove_platform),
            (
                PolicyLayer::Community,
                &self.add_community_reject,
                &self.remove_community_reject,
            ),
        ]
    }

    /// Canonical bytes, used as the signed payload of a governed update.
    pub fn encode(&self, enc: &mut Encoder) {
        for (_, adds, removes) in self.layers() {
            enc.u32(adds.len() as u32);
            for m in adds {
                enc.u8(m.class.code()).bytes(m.digest.as_bytes()).str(&m.label);
            }
            enc.u32(removes.len() as u32);
            for r in removes {
                enc.u8(r.class.code()).bytes(r.digest.as_bytes());
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        let mut out = PolicyDelta::default();
        for layer in 0..3 {
            let n = dec.u32()?;
            let mut adds = Vec::new();
            for _ in 0..n {
                let class = MeasurementClass::from_code(dec.u8()?)?;
                let digest = decode_digest(dec)?;
                adds.push(Measurement::new(class, digest, dec.string()?));
            }
            let n = dec.u32()?;
            let mut removes = Vec::new();
            for _ in 0..n {
                let class = MeasurementClass::from_code(dec.u8()?)?;
                removes.push(MeasurementRef {
                    class,
                    digest: decode_digest(dec)?,
                });
            }
            let (a, r) = match layer {
                0 => (&mut out.add_vendor, &mut out.remove_vendor),
                1 => (&mut out.add_platform, &mut out.remove_platform),
                _ => (&mut out.add_community_reject, &mut out.remove_community_reject),
            };
            *a = adds;
            *r = removes;
        }
        Ok(out)
    }
}
