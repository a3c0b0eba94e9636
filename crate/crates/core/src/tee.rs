// SPDX-License-Identifier: Apache-2.0

//! Simulated confidential-VM platforms and enclave instances.
//!
//! Each [`TeePlatform`] owns a root signing key standing in for the hardware
//! vendor's attestation root. A [`TeeInstance`] generates its enclave key
//! pair internally and never hands out the private half, except through
//! [`TeeInstance::leaked_key`] when the `LeakEnclaveKey` fault is set.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, decode_digest, digest_parts, generate_keypair, CryptoError, Digest, KeyId, KeyPair, PublicKey,
    SealedEnvelope, Signature,
};
use crate::policy::{MeasurementClass, MeasurementMap, PolicyError, PolicySet, PolicyVerdict, RejectReason};
use crate::wire::{Decoder, Encoder, WireError};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum PlatformKind {
    SimTdx,
    SimSev,
}

impl PlatformKind {
    pub const ALL: [PlatformKind; 2] = [PlatformKind::SimTdx, PlatformKind::SimSev];

    pub fn code(self) -> u8 {
        match self {
            PlatformKind::SimTdx => 1,
            PlatformKind::SimSev => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            1 => Ok(PlatformKind::SimTdx),
            2 => Ok(PlatformKind::SimSev),
            other => Err(WireError::invalid("platform", format!("code {other}"))),
        }
    }

    fn tag(self) -> &'static [u8] {
        match self {
            PlatformKind::SimTdx => b"sim-tdx",
            PlatformKind::SimSev => b"sim-sev",
        }
    }
}

impl fmt::Display for PlatformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A simulated hardware vendor: a platform kind and its root key.
#[derive(Clone, Debug)]
pub struct TeePlatform {
    kind: PlatformKind,
    root: KeyPair,
}

impl TeePlatform {
    /// Root keys are domain-separated by kind, so the two kinds never share
    /// a root even when built from the same seed.
    pub fn new(kind: PlatformKind, seed: &[u8; 32]) -> Self {
        let root_seed = digest_parts(&[b"confidant/platform-root", kind.tag(), seed]);
        TeePlatform {
            kind,
            root: generate_keypair(&root_seed.0),
        }
    }

    pub fn kind(&self) -> PlatformKind {
        self.kind
    }

    pub fn root_public(&self) -> &PublicKey {
        self.root.public_key()
    }

    /// Vendor-class measurements every instance of this platform reports.
    pub fn vendor_measurements(&self) -> MeasurementMap {
        vendor_measurements(self.kind)
    }
}

pub fn vendor_measurements(kind: PlatformKind) -> MeasurementMap {
    MeasurementClass::ALL
        .into_iter()
        .filter(|c| c.is_vendor())
        .map(|c| {
            (
                c,
                digest_parts(&[b"confidant/vendor-measurement", kind.tag(), &[c.code()]]),
            )
        })
        .collect()
}

/// Root public keys a verifier trusts, one per platform kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlatformRoots {
    roots: Vec<(PlatformKind, PublicKey)>,
}

impl PlatformRoots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_platforms<'a>(platforms: impl IntoIterator<Item = &'a TeePlatform>) -> Self {
        let mut roots = PlatformRoots::new();
        for p in platforms {
            roots.insert(p.kind, *p.root_public());
        }
        roots
    }

    pub fn insert(&mut self, kind: PlatformKind, key: PublicKey) {
        self.roots.retain(|(k, _)| *k != kind);
        self.roots.push((kind, key));
        self.roots.sort_by_key(|(k, _)| *k);
    }

    pub fn get(&self, kind: PlatformKind) -> Option<&PublicKey> {
        self.roots.iter().find(|(k, _)| *k == kind).map(|(_, v)| v)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Fault {
    ForgedRootSignature,
    TamperedMeasurement(MeasurementClass),
    LeakEnclaveKey,
    StaleEpochReport,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultSet(BTreeSet<Fault>);

impl FaultSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, f: Fault) {
        self.0.insert(f);
    }

    pub fn contains(&self, f: Fault) -> bool {
        self.0.contains(&f)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Fault> {
        self.0.iter()
    }

    /// Faults that make the instance's attestation evidence invalid.
    pub fn corrupts_attestation(&self) -> bool {
        self.0
            .iter()
            .any(|f| matches!(f, Fault::ForgedRootSignature | Fault::TamperedMeasurement(_)))
    }
}

impl FromIterator<Fault> for FaultSet {
    fn from_iter<I: IntoIterator<Item = Fault>>(iter: I) -> Self {
        FaultSet(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub platform: PlatformKind,
    pub measurements: MeasurementMap,
    pub report_data: Digest,
    pub nonce: [u8; 32],
    pub epoch: u64,
    pub root_signature: Signature,
}

/// `sha256(encoded public key ‖ nonce)`, the key-binding value carried in
/// `report_data`.
pub fn report_data_for(public_key: &PublicKey, nonce: &[u8; 32]) -> Digest {
    let mut buf = public_key.to_bytes().to_vec();
    buf.extend_from_slice(nonce);
    crypto::digest(&buf)
}

impl AttestationReport {
    fn encode_body(&self, enc: &mut Encoder) {
        enc.u8(self.platform.code()).u32(self.measurements.len() as u32);
        for (class, d) in &self.measurements {
            enc.u8(class.code()).bytes(d.as_bytes());
        }
        enc.bytes(self.report_data.as_bytes())
            .bytes(&self.nonce)
            .u64(self.epoch);
    }

    /// The bytes the platform root signs: every field before the signature.
    pub fn signed_payload(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_body(&mut enc);
        enc.finish()
    }

    pub fn encode(&self, enc: &mut Encoder) {
        self.encode_body(enc);
        self.root_signature.encode(enc);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        let platform = PlatformKind::from_code(dec.u8()?)?;
        let n = dec.u32()?;
        let mut measurements = MeasurementMap::new();
        for _ in 0..n {
            let class = MeasurementClass::from_code(dec.u8()?)?;
            if measurements.insert(class, decode_digest(dec)?).is_some() {
                return Err(WireError::invalid("measurements", "duplicate class"));
            }
        }
        let report_data = decode_digest(dec)?;
        let nonce_raw = dec.bytes()?;
        let nonce: [u8; 32] = nonce_raw
            .try_into()
            .map_err(|_| WireError::invalid("nonce", format!("{} bytes", nonce_raw.len())))?;
        let epoch = dec.u64()?;
        let root_signature = Signature::decode(dec)?;
        Ok(AttestationReport {
            platform,
            measurements,
            report_data,
            nonce,
            epoch,
            root_signature,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut dec = Decoder::new(bytes);
        let r = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(r)
    }

    pub fn digest(&self) -> Digest {
        crypto::digest(&self.to_bytes())
    }

    pub fn binds(&self, public_key: &PublicKey) -> bool {
        report_data_for(public_key, &self.nonce) == self.report_data
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationFailure {
    #[error("no trusted root for platform {0}")]
    UnknownPlatform(PlatformKind),
    #[error("root signature invalid: {0}")]
    BadRootSignature(CryptoError),
    #[error("report_data does not bind the presented public key")]
    KeyBindingMismatch,
    #[error("policy rejected report: {0}")]
    Policy(RejectReason),
    #[error("report incomplete: {0}")]
    Incomplete(PolicyError),
}

/// Full verifier check: root signature, key binding, then policy.
pub fn verify_report(
    report: &AttestationReport,
    public_key: &PublicKey,
    policy: &PolicySet,
    roots: &PlatformRoots,
    community_override: bool,
) -> Result<(), AttestationFailure> {
    let root = roots
        .get(report.platform)
        .ok_or(AttestationFailure::UnknownPlatform(report.platform))?;
    crypto::verify(&report.root_signature, root, &report.signed_payload())
        .map_err(AttestationFailure::BadRootSignature)?;
    if !report.binds(public_key) {
        return Err(AttestationFailure::KeyBindingMismatch);
    }
    match policy.evaluate_with(&report.measurements, community_override) {
        Ok(PolicyVerdict::Accept) => Ok(()),
        Ok(PolicyVerdict::Reject(r)) => Err(AttestationFailure::Policy(r)),
        Err(e) => Err(AttestationFailure::Incomplete(e)),
    }
}

/// A running enclave.
#[derive(Clone, Debug)]
pub struct TeeInstance {
    instance_id: Digest,
    platform: TeePlatform,
    enclave: KeyPair,
    measurements: MeasurementMap,
    epoch: u64,
    faults: FaultSet,
}

fn enclave_seed(kind: PlatformKind, seed: &[u8; 32], epoch: u64) -> [u8; 32] {
    digest_parts(&[b"confidant/enclave-key", kind.tag(), seed, &epoch.to_le_bytes()]).0
}

impl TeeInstance {
    pub fn spawn(platform: &TeePlatform, vm_image_digest: Digest, seed: &[u8; 32]) -> Self {
        let mut measurements = platform.vendor_measurements();
        measurements.insert(MeasurementClass::VmImage, vm_image_digest);
        TeeInstance {
            instance_id: digest_parts(&[
                b"confidant/instance",
                platform.kind.tag(),
                vm_image_digest.as_bytes(),
                seed,
            ]),
            platform: platform.clone(),
            enclave: generate_keypair(&enclave_seed(platform.kind, seed, 0)),
            measurements,
            epoch: 0,
            faults: FaultSet::none(),
        }
    }

    pub fn with_faults(mut self, faults: FaultSet) -> Self {
        self.faults = faults;
        self
    }

    pub fn set_faults(&mut self, faults: FaultSet) {
        self.faults = faults;
    }

    pub fn faults(&self) -> &FaultSet {
        &self.faults
    }

    pub fn instance_id(&self) -> Digest {
        self.instance_id
    }

    pub fn platform(&self) -> PlatformKind {
        self.platform.kind
    }

    pub fn public_key(&self) -> &PublicKey {
        self.enclave.public_key()
    }

    pub fn key_id(&self) -> KeyId {
        self.enclave.key_id()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn measurements(&self) -> &MeasurementMap {
        &self.measurements
    }

    pub fn attest(&self, nonce: &[u8; 32]) -> AttestationReport {
        let mut measurements = self.measurements.clone();
        for fault in self.faults.iter() {
            if let Fault::TamperedMeasurement(class) = fault {
                if let Some(d) = measurements.get_mut(class) {
                    *d = digest_parts(&[b"confidant/tampered", d.as_bytes()]);
                }
            }
        }
        let epoch = if self.faults.contains(Fault::StaleEpochReport) {
            self.epoch.wrapping_sub(1)
        } else {
            self.epoch
        };
        let mut report = AttestationReport {
            platform: self.platform.kind,
            measurements,
            report_data: report_data_for(self.public_key(), nonce),
            nonce: *nonce,
            epoch,
            root_signature: Signature {
                signer_key_id: Digest::ZERO,
                payload_digest: Digest::ZERO,
                sig_bytes: Vec::new(),
            },
        };
        let payload = report.signed_payload();
        report.root_signature = if self.faults.contains(Fault::ForgedRootSignature) {
            let forger = generate_keypair(&digest_parts(&[b"confidant/forger", self.instance_id.as_bytes()]).0);
            let mut sig = crypto::sign(&forger, &payload);
            sig.signer_key_id = self.platform.root.key_id();
            sig
        } else {
            crypto::sign(&self.platform.root, &payload)
        };
        report
    }

    /// Decrypts an envelope inside the enclave.
    pub fn open(&self, envelope: &SealedEnvelope) -> Result<Vec<u8>, CryptoError> {
        crypto::open(envelope, &self.enclave)
    }

    pub fn execute_workload(&self, input: &[u8]) -> Vec<u8> {
        execute_workload(input)
    }

    /// Resets the enclave: a fresh key pair for the next epoch. Measurements
    /// and instance id carry over.
    pub fn rotate(&self, seed: &[u8; 32]) -> TeeInstance {
        let epoch = self.epoch + 1;
        TeeInstance {
            enclave: generate_keypair(&enclave_seed(self.platform.kind, seed, epoch)),
            epoch,
            ..self.clone()
        }
    }

    /// The enclave private key, reachable only under `LeakEnclaveKey`.
    pub fn leaked_key(&self) -> Option<&KeyPair> {
        self.faults.contains(Fault::LeakEnclaveKey).then_some(&self.enclave)
    }
}

pub const WORKLOAD_TAG: u8 = 0x01;
pub const WORKLOAD_CONSTANT: &[u8] = b"confidant/mock-inference/v1";
pub const WORKLOAD_OUTPUT_LEN: usize = 1 + 32 + 8;

/// Deterministic stand-in for model inference:
/// `tag ‖ sha256(constant ‖ input) ‖ len(input) as u64 LE`.
pub fn execute_workload(input: &[u8]) -> Vec<u8> {
    let mut pre = WORKLOAD_CONSTANT.to_vec();
    pre.extend_from_slice(input);
    let mut out = Vec::with_capacity(WORKLOAD_OUTPUT_LEN);
    out.push(WORKLOAD_TAG);
    out.extend_from_slice(crypto::digest(&pre).as_bytes());
    out.extend_from_slice(&(input.len() as u64).to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Measurement, PolicySet};
    use sha2::{Digest as _, Sha256};

    fn tdx() -> TeePlatform {
        TeePlatform::new(PlatformKind::SimTdx, &[1; 32])
    }

    fn sev() -> TeePlatform {
        TeePlatform::new(PlatformKind::SimSev, &[1; 32])
    }

    fn image() -> Digest {
        crypto::digest(b"vm-image-v1")
    }

    fn policy_for(platforms: &[&TeePlatform]) -> PolicySet {
        let mut vendor = Vec::new();
        for p in platforms {
            for (c, d) in p.vendor_measurements() {
                vendor.push(Measurement::new(c, d, ""));
            }
        }
        PolicySet::from_parts(
            1,
            vendor,
            [Measurement::new(MeasurementClass::VmImage, image(), "v1")],
            [],
        )
        .unwrap()
    }

    #[test]
    fn platforms_have_distinct_roots() {
        assert_ne!(tdx().root_public(), sev().root_public());
    }

    #[test]
    fn spawn_is_deterministic() {
        let a = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let b = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        assert_eq!(a.instance_id(), b.instance_id());
        assert_eq!(a.public_key(), b.public_key());
        assert_eq!(a.epoch(), 0);
    }

    #[test]
    fn image_changes_only_vm_measurement() {
        let a = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let b = TeeInstance::spawn(&tdx(), crypto::digest(b"other"), &[3; 32]);
        for class in MeasurementClass::ALL {
            let same = a.measurements()[&class] == b.measurements()[&class];
            assert_eq!(same, class.is_vendor(), "{class}");
        }
    }

    #[test]
    fn enclave_keys_separated_by_platform() {
        let a = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let b = TeeInstance::spawn(&sev(), image(), &[3; 32]);
        assert_ne!(a.key_id(), b.key_id());
    }

    #[test]
    fn nominal_report_verifies_and_binds_key() {
        let p = tdx();
        let inst = TeeInstance::spawn(&p, image(), &[3; 32]);
        let nonce = [8u8; 32];
        let r = inst.attest(&nonce);
        let roots = PlatformRoots::from_platforms([&p]);
        assert_eq!(
            verify_report(&r, inst.public_key(), &policy_for(&[&p]), &roots, true),
            Ok(())
        );
        let mut pre = inst.public_key().to_bytes().to_vec();
        pre.extend_from_slice(&nonce);
        let expected: [u8; 32] = Sha256::digest(&pre).into();
        assert_eq!(r.report_data.0, expected);
    }

    #[test]
    fn forged_root_signature_fails_verification() {
        let p = tdx();
        let inst =
            TeeInstance::spawn(&p, image(), &[3; 32]).with_faults([Fault::ForgedRootSignature].into_iter().collect());
        let r = inst.attest(&[0; 32]);
        let roots = PlatformRoots::from_platforms([&p]);
        assert!(matches!(
            verify_report(&r, inst.public_key(), &policy_for(&[&p]), &roots, true),
            Err(AttestationFailure::BadRootSignature(_))
        ));
    }

    #[test]
    fn tampered_measurement_changes_only_that_class() {
        let p = tdx();
        let inst = TeeInstance::spawn(&p, image(), &[3; 32]).with_faults(
            [Fault::TamperedMeasurement(MeasurementClass::VmImage)]
                .into_iter()
                .collect(),
        );
        let r = inst.attest(&[0; 32]);
        assert_ne!(
            r.measurements[&MeasurementClass::VmImage],
            inst.measurements()[&MeasurementClass::VmImage]
        );
        assert_eq!(
            r.measurements[&MeasurementClass::Firmware],
            inst.measurements()[&MeasurementClass::Firmware]
        );
        let roots = PlatformRoots::from_platforms([&p]);
        assert!(matches!(
            verify_report(&r, inst.public_key(), &policy_for(&[&p]), &roots, true),
            Err(AttestationFailure::Policy(RejectReason::UnknownMeasurement { .. }))
        ));
    }

    #[test]
    fn stale_epoch_fault_reports_previous_epoch() {
        let p = tdx();
        let inst = TeeInstance::spawn(&p, image(), &[3; 32]).rotate(&[4; 32]);
        let stale = inst
            .clone()
            .with_faults([Fault::StaleEpochReport].into_iter().collect());
        assert_eq!(inst.attest(&[0; 32]).epoch, 1);
        assert_eq!(stale.attest(&[0; 32]).epoch, 0);
    }

    #[test]
    fn nonce_binding() {
        let inst = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let a = inst.attest(&[1; 32]);
        let b = inst.attest(&[2; 32]);
        assert_ne!(a.report_data, b.report_data);
        assert_eq!(a.measurements, b.measurements);
    }

    #[test]
    fn mismatched_key_fails_binding() {
        let p = tdx();
        let inst = TeeInstance::spawn(&p, image(), &[3; 32]);
        let other = generate_keypair(&[99; 32]);
        let r = inst.attest(&[0; 32]);
        let roots = PlatformRoots::from_platforms([&p]);
        assert_eq!(
            verify_report(&r, other.public_key(), &policy_for(&[&p]), &roots, true),
            Err(AttestationFailure::KeyBindingMismatch)
        );
    }

    #[test]
    fn workload_shape_and_independent_recompute() {
        let out = execute_workload(b"");
        assert_eq!(out.len(), 41);
        let input = b"what is the capital of france";
        let out = execute_workload(input);
        let mut h = Sha256::new();
        h.update(b"confidant/mock-inference/v1");
        h.update(input);
        let expected: [u8; 32] = h.finalize().into();
        assert_eq!(out[0], 0x01);
        assert_eq!(&out[1..33], &expected);
        assert_eq!(&out[33..], &(input.len() as u64).to_le_bytes());
        let a = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let b = TeeInstance::spawn(&sev(), image(), &[4; 32]);
        assert_eq!(a.execute_workload(input), b.execute_workload(input));
    }

    #[test]
    fn rotation_contract() {
        let inst = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let env = crypto::seal(b"pre-rotation", inst.public_key(), &[0; 32]);
        let rotated = inst.rotate(&[5; 32]);
        assert_eq!(rotated.epoch(), 1);
        assert_ne!(rotated.key_id(), inst.key_id());
        assert_eq!(rotated.instance_id(), inst.instance_id());
        assert_eq!(rotated.measurements(), inst.measurements());
        assert!(matches!(rotated.open(&env), Err(CryptoError::WrongRecipient { .. })));
        let twice = rotated.rotate(&[6; 32]);
        let fresh = TeeInstance::spawn(&tdx(), image(), &[3; 32])
            .rotate(&[5; 32])
            .rotate(&[6; 32]);
        assert_eq!(twice.public_key(), fresh.public_key());
        assert_eq!(twice.epoch(), 2);
    }

    #[test]
    fn key_only_leaks_under_fault() {
        let inst = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        assert!(inst.leaked_key().is_none());
        let leaky = inst.with_faults([Fault::LeakEnclaveKey].into_iter().collect());
        assert_eq!(leaky.leaked_key().unwrap().key_id(), leaky.key_id());
    }

    #[test]
    fn report_wire_round_trip() {
        let inst = TeeInstance::spawn(&tdx(), image(), &[3; 32]);
        let r = inst.attest(&[7; 32]);
        assert_eq!(AttestationReport::from_bytes(&r.to_bytes()).unwrap(), r);
    }
}
