// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use confidant_core::committee::{CommitteeMember, CommitteeRoster, CommitteeVerdict};
use confidant_core::crypto::{digest, generate_keypair, KeyPair};
use confidant_core::ledger::{Evidence, Genesis, Ledger, LedgerConfig, Registration};
use confidant_core::policy::{Measurement, MeasurementClass, PolicySet};
use confidant_core::storage::ContentStore;
use confidant_core::tee::{PlatformKind, PlatformRoots, TeeInstance, TeePlatform};

pub const IMAGE: &[u8] = b"approved-image";

pub struct World {
    pub ledger: Ledger,
    pub storage: ContentStore,
    pub platforms: Vec<TeePlatform>,
    pub members: Vec<CommitteeMember>,
    pub updater: KeyPair,
}

pub fn platforms() -> Vec<TeePlatform> {
    PlatformKind::ALL
        .iter()
        .map(|k| TeePlatform::new(*k, &[k.code(); 32]))
        .collect()
}

pub fn policy_for(platforms: &[TeePlatform]) -> PolicySet {
    let vendor: Vec<_> = platforms
        .iter()
        .flat_map(|p| p.vendor_measurements())
        .map(|(c, d)| Measurement::new(c, d, ""))
        .collect();
    PolicySet::from_parts(
        1,
        vendor,
        [Measurement::new(MeasurementClass::VmImage, digest(IMAGE), "img")],
        [],
    )
    .unwrap()
}

/// A ledger with both platforms trusted and a five-member committee whose
/// first `dishonest` members always vote Accept.
pub fn world(config: LedgerConfig, dishonest: usize) -> World {
    let platforms = platforms();
    let members: Vec<_> = (0..5u8)
        .map(|i| {
            if (i as usize) < dishonest {
                CommitteeMember::dishonest(&[200 + i; 32], CommitteeVerdict::Accept)
            } else {
                CommitteeMember::honest(&[200 + i; 32])
            }
        })
        .collect();
    let updater = generate_keypair(&[77; 32]);
    let ledger = Ledger::new(
        config,
        Genesis {
            policy: policy_for(&platforms),
            policy_updater: *updater.public_key(),
            roots: PlatformRoots::from_platforms(&platforms),
            committee: CommitteeRoster::from_members(&members),
        },
    );
    World {
        ledger,
        storage: ContentStore::in_memory(),
        platforms,
        members,
        updater,
    }
}

impl World {
    pub fn spawn(&self, kind: PlatformKind, seed: &[u8; 32]) -> TeeInstance {
        let p = self.platforms.iter().find(|p| p.kind() == kind).unwrap();
        TeeInstance::spawn(p, digest(IMAGE), seed)
    }
}

pub fn direct(inst: &TeeInstance) -> Registration {
    Registration {
        node_id: inst.instance_id(),
        platform: inst.platform(),
        public_key: *inst.public_key(),
        epoch: inst.epoch(),
        evidence: Evidence::Direct(inst.attest(&[0; 32])),
    }
}

pub fn seed(label: &str, i: u64) -> [u8; 32] {
    confidant_core::crypto::digest_parts(&[label.as_bytes(), &i.to_le_bytes()]).0
}
