// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! The ordering node: consensus replica plus the block pipeline on top of it.

mod actor;
pub mod checkpoint;
pub mod cutter;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub use actor::{NodeRecord, NodeStats, OrderingNode};
pub use checkpoint::{CheckpointStore, DEFAULT_CHECKPOINT_PERIOD};
pub use cutter::{is_ttc, ttc_envelope, BlockCutter, CutBlock, NodeState, OrderingState, TTC_CLIENT_BASE};

use crate::consensus::ClusterConfig;
use crate::crypto::{self, KeyPair, NodeId, SIGNATURE_LEN};
use crate::transport::{CostModel, EndpointId};

pub const DEFAULT_BLOCK_SIZE: usize = 10;
pub const DEFAULT_FLUSH_TIMEOUT: Duration = Duration::from_secs(1);

/// Produces a node's header signatures.
#[derive(Clone)]
pub enum Signer {
    Ecdsa(Arc<KeyPair>),
    /// Keyed SHA-256 stand-in with the length of a real signature, for
    /// benchmark sweeps whose signing time is modelled rather than spent.
    Modeled([u8; 32]),
}

impl Signer {
    pub fn sign(&self, header: &[u8]) -> Vec<u8> {
        match self {
            Signer::Ecdsa(k) => k.sign(header).to_vec(),
            Signer::Modeled(secret) => {
                let a = crypto::hash_parts([secret.as_slice(), header]);
                let b = crypto::hash_parts([header, secret.as_slice()]);
                let mut out = Vec::with_capacity(SIGNATURE_LEN);
                out.extend_from_slice(&a.0);
                out.extend_from_slice(&b.0);
                out
            }
        }
    }
}

impl std::fmt::Debug for Signer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Signer::Ecdsa(_) => f.write_str("Signer::Ecdsa"),
            Signer::Modeled(_) => f.write_str("Signer::Modeled"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: NodeId,
    pub cluster: Arc<ClusterConfig>,
    pub block_size: usize,
    pub flush_timeout: Duration,
    pub signing_workers: usize,
    /// Virtual time charged per header signature in the simulator.
    pub sign_cost: Duration,
    pub signer: Signer,
    pub checkpoint_period: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Frontends allowed to register.
    pub frontends: BTreeSet<EndpointId>,
    /// Used to estimate the fan-out time charged to a signing worker.
    pub costs: CostModel,
    /// Keep per-instance decisions and emitted blocks for inspection.
    pub record: bool,
}

impl NodeConfig {
    pub fn new(id: NodeId, cluster: Arc<ClusterConfig>, key: Arc<KeyPair>) -> Self {
        Self {
            id,
            cluster,
            block_size: DEFAULT_BLOCK_SIZE,
            flush_timeout: DEFAULT_FLUSH_TIMEOUT,
            signing_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            sign_cost: Duration::ZERO,
            signer: Signer::Ecdsa(key),
            checkpoint_period: DEFAULT_CHECKPOINT_PERIOD,
            checkpoint_dir: None,
            frontends: BTreeSet::new(),
            costs: CostModel::free(),
            record: false,
        }
    }
}
