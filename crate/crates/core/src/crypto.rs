// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! SHA-256 digests and ECDSA P-256 header signatures.
//!
//! Signatures use RFC 6979 deterministic nonces, so signing the same header
//! with the same key always yields the same 64-byte `r || s` encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};

use crate::error::CryptoError;

/// Identifier of an ordering node (and, in the transport layer, of any endpoint).
pub type NodeId = u16;

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Incremental hashing over several slices, equal to `hash` of their concatenation.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: VerifyingKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &hex::encode(self.public_key_bytes()))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn from_secret_bytes(secret: &[u8]) -> Result<Self, CryptoError> {
        let signing = SigningKey::from_slice(secret).map_err(|_| CryptoError::MalformedKey)?;
        let public = *signing.verifying_key();
        Ok(Self { signing, public })
    }

    /// Derives a key pair from a seed. The same `(seed, node)` always gives
    /// the same key, which keeps simulated clusters reproducible.
    pub fn derive(seed: u64, node: NodeId) -> Self {
        let mut counter = 0u32;
        loop {
            let material = hash_parts([
                b"bftorder-key".as_slice(),
                &seed.to_be_bytes(),
                &node.to_be_bytes(),
                &counter.to_be_bytes(),
            ]);
            if let Ok(kp) = Self::from_secret_bytes(&material.0) {
                return kp;
            }
            counter += 1;
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes().into()
    }

    /// SEC1 compressed encoding (33 bytes).
    pub fn public_key_bytes(&self) -> Vec<u8> {
        self.public.to_encoded_point(true).as_bytes().to_vec()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.public)
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        let sig: Signature = self.signing.sign(msg);
        sig.to_bytes().into()
    }

    /// Writes `<stem>.key` (hex secret) and `<stem>.pub` (hex SEC1 public key).
    pub fn write_files(&self, stem: &Path) -> std::io::Result<()> {
        std::fs::write(stem.with_extension("key"), hex::encode(self.secret_bytes()) + "\n")?;
        std::fs::write(stem.with_extension("pub"), hex::encode(self.public_key_bytes()) + "\n")
    }

    pub fn read_secret_file(path: &Path) -> Result<Self, CryptoError> {
        let bytes = read_hex_file(path)?;
        Self::from_secret_bytes(&bytes)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(VerifyingKey);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.to_bytes()))
    }
}

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        VerifyingKey::from_sec1_bytes(bytes)
            .map(PublicKey)
            .map_err(|_| CryptoError::MalformedPublicKey)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_encoded_point(true).as_bytes().to_vec()
    }

    pub fn read_file(path: &Path) -> Result<Self, CryptoError> {
        Self::from_bytes(&read_hex_file(path)?)
    }

    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        match Signature::from_slice(sig) {
            Ok(sig) => self.0.verify(msg, &sig).is_ok(),
            Err(_) => false,
        }
    }
}

fn read_hex_file(path: &Path) -> Result<Vec<u8>, CryptoError> {
    let key_err = |reason: String| CryptoError::KeyFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| key_err(e.to_string()))?;
    hex::decode(text.trim()).map_err(|e| key_err(e.to_string()))
}

/// Public keys of every node, distributed out of band through the cluster config.
#[derive(Debug, Clone, Default)]
pub struct PublicKeyDirectory {
    keys: BTreeMap<NodeId, PublicKey>,
}

impl PublicKeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: NodeId, key: PublicKey) -> Option<PublicKey> {
        self.keys.insert(node, key)
    }

    pub fn get(&self, node: NodeId) -> Option<&PublicKey> {
        self.keys.get(&node)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.keys.keys().copied()
    }

    /// Directory of keys derived with [`KeyPair::derive`] for nodes `0..n`.
    pub fn derived(seed: u64, n: usize) -> (Vec<KeyPair>, Self) {
        let pairs: Vec<KeyPair> = (0..n as NodeId).map(|i| KeyPair::derive(seed, i)).collect();
        let mut dir = Self::new();
        for (i, kp) in pairs.iter().enumerate() {
            dir.insert(i as NodeId, kp.public_key());
        }
        (pairs, dir)
    }

    /// Verifies `sig` over `msg` under `node`'s key. An unknown node is an
    /// error, distinct from a signature that simply does not verify.
    pub fn verify(&self, node: NodeId, msg: &[u8], sig: &[u8]) -> Result<bool, CryptoError> {
        let key = self.get(node).ok_or(CryptoError::UnknownNode(node))?;
        Ok(key.verify(msg, sig))
    }
}
