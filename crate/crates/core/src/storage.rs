// SPDX-License-Identifier: Apache-2.0

//! Content-addressed object store standing in for decentralized storage.
//!
//! Objects are keyed by the SHA-256 of their bytes. Every `get` re-hashes
//! the stored bytes, so corruption is reported rather than returned. With a
//! backing directory, each object is also written to a file named by its
//! lowercase-hex digest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{decode_digest, digest, Digest};
use crate::wire::{Decoder, Encoder, WireError};

/// Pointer to a stored object: its digest and length.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct StorageRef {
    pub content_digest: Digest,
    pub size: u64,
}

impl StorageRef {
    /// 32-byte digest + 8-byte size.
    pub const ENCODED_LEN: usize = 40;

    pub fn to_bytes(&self) -> [u8; 40] {
        let mut out = [0u8; 40];
        out[..32].copy_from_slice(self.content_digest.as_bytes());
        out[32..].copy_from_slice(&self.size.to_le_bytes());
        out
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.content_digest.as_bytes()).u64(self.size);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(StorageRef {
            content_digest: decode_digest(dec)?,
            size: dec.u64()?,
        })
    }
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("no object with digest {0}")]
    NotFound(Digest),
    #[error("stored object {expected} hashes to {actual}")]
    IntegrityMismatch { expected: Digest, actual: Digest },
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Default)]
pub struct ContentStore {
    objects: RwLock<BTreeMap<Digest, Vec<u8>>>,
    dir: Option<PathBuf>,
}

impl ContentStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// A store persisted under `dir`. Existing objects in the directory are
    /// loaded as-is and re-verified on read.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, StorageError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut objects = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(d) = name.to_str().and_then(|n| Digest::from_hex(n).ok()) else {
                continue;
            };
            objects.insert(d, fs::read(entry.path())?);
        }
        Ok(ContentStore {
            objects: RwLock::new(objects),
            dir: Some(dir),
        })
    }

    pub fn put(&self, bytes: &[u8]) -> Result<StorageRef, StorageError> {
        let r = StorageRef {
            content_digest: digest(bytes),
            size: bytes.len() as u64,
        };
        let mut objects = self.objects.write().expect("storage lock poisoned");
        if let std::collections::btree_map::Entry::Vacant(slot) = objects.entry(r.content_digest) {
            if let Some(dir) = &self.dir {
                fs::write(dir.join(r.content_digest.to_hex()), bytes)?;
            }
            slot.insert(bytes.to_vec());
        }
        Ok(r)
    }

    pub fn get(&self, r: &StorageRef) -> Result<Vec<u8>, StorageError> {
        let objects = self.objects.read().expect("storage lock poisoned");
        let bytes = objects
            .get(&r.content_digest)
            .ok_or(StorageError::NotFound(r.content_digest))?;
        let actual = digest(bytes);
        if actual != r.content_digest {
            return Err(StorageError::IntegrityMismatch {
                expected: r.content_digest,
                actual,
            });
        }
        Ok(bytes.clone())
    }

    pub fn len(&self) -> usize {
        self.objects.read().expect("storage lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of every stored object, for audit and adversary tooling.
    pub fn snapshot(&self) -> Vec<(Digest, Vec<u8>)> {
        self.objects
            .read()
            .expect("storage lock poisoned")
            .iter()
            .map(|(d, b)| (*d, b.clone()))
            .collect()
    }

    /// Fault injection: flips one bit of a stored object in place.
    pub fn corrupt(&self, d: &Digest) -> bool {
        let mut objects = self.objects.write().expect("storage lock poisoned");
        match objects.get_mut(d) {
            Some(bytes) if !bytes.is_empty() => {
                bytes[0] ^= 0x01;
                if let Some(dir) = &self.dir {
                    let _ = fs::write(dir.join(d.to_hex()), &*bytes);
                }
                true
            }
            Some(bytes) => {
                bytes.push(0);
                true
            }
            None => false,
        }
    }
}
