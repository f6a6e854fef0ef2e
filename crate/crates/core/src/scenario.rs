// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Builds simulated clusters of ordering nodes and frontends, and checks
//! the agreement properties over what they delivered.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use crate::consensus::ClusterConfig;
use crate::crypto::{Digest, KeyPair, NodeId, PublicKeyDirectory};
use crate::frontend::{FrontendActor, FrontendConfig, FrontendMode, LoadSpec};
use crate::node::{NodeConfig, OrderingNode, Signer, DEFAULT_CHECKPOINT_PERIOD, DEFAULT_FLUSH_TIMEOUT};
use crate::transport::sim::{SimOptions, SimReport, Simulator};
use crate::transport::{frontend_endpoint, EndpointId};
use crate::types::{verify_chain, ChainCheck, Envelope};

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub cluster: ClusterConfig,
    pub frontends: usize,
    pub frontend_mode: FrontendMode,
    pub stall_timeout: Duration,
    pub block_size: usize,
    pub flush_timeout: Duration,
    pub signing_workers: usize,
    pub sign_cost: Duration,
    /// Use the keyed-hash stand-in instead of ECDSA for header signatures.
    pub modeled_signatures: bool,
    pub checkpoint_period: u64,
    /// Load generators, by frontend index.
    pub loads: Vec<(usize, LoadSpec)>,
    /// Timed submissions, by frontend index.
    pub scripts: Vec<(usize, Vec<(Duration, Envelope)>)>,
    pub record: bool,
    pub retain_blocks: bool,
    pub key_seed: u64,
    pub sim: SimOptions,
}

impl ScenarioSpec {
    pub fn new(cluster: ClusterConfig, frontends: usize, seed: u64) -> Self {
        Self {
            cluster,
            frontends,
            frontend_mode: FrontendMode::Match2f1,
            stall_timeout: Duration::from_secs(5),
            block_size: 10,
            flush_timeout: DEFAULT_FLUSH_TIMEOUT,
            signing_workers: 1,
            sign_cost: Duration::ZERO,
            modeled_signatures: false,
            checkpoint_period: DEFAULT_CHECKPOINT_PERIOD,
            loads: Vec::new(),
            scripts: Vec::new(),
            record: true,
            retain_blocks: true,
            key_seed: seed,
            sim: SimOptions::new(seed),
        }
    }
}

pub struct Scenario {
    pub sim: Simulator,
    pub keys: Vec<Arc<KeyPair>>,
    pub directory: Arc<PublicKeyDirectory>,
    pub n: usize,
    pub frontends: usize,
}

/// The actors of a scenario, ready to run under any transport.
pub struct Actors {
    pub nodes: Vec<OrderingNode>,
    pub frontends: Vec<FrontendActor>,
    pub keys: Vec<Arc<KeyPair>>,
    pub directory: Arc<PublicKeyDirectory>,
}

pub fn build_actors(spec: &ScenarioSpec) -> Actors {
    let n = spec.cluster.n;
    let (keys, dir) = PublicKeyDirectory::derived(spec.key_seed, n);
    let keys: Vec<Arc<KeyPair>> = keys.into_iter().map(Arc::new).collect();
    let dir = Arc::new(dir);
    let cluster = Arc::new(spec.cluster.clone());
    let frontend_eps: BTreeSet<EndpointId> = (0..spec.frontends).map(frontend_endpoint).collect();
    let mut nodes = Vec::with_capacity(n);
    for id in 0..n as NodeId {
        let mut cfg = NodeConfig::new(id, cluster.clone(), keys[id as usize].clone());
        cfg.block_size = spec.block_size;
        cfg.flush_timeout = spec.flush_timeout;
        cfg.signing_workers = spec.signing_workers;
        cfg.sign_cost = spec.sign_cost;
        cfg.checkpoint_period = spec.checkpoint_period;
        cfg.frontends = frontend_eps.clone();
        cfg.costs = spec.sim.costs.clone();
        cfg.record = spec.record;
        if spec.modeled_signatures {
            cfg.signer = Signer::Modeled(keys[id as usize].secret_bytes());
        }
        nodes.push(OrderingNode::new(cfg));
    }
    let ids: Vec<NodeId> = (0..n as NodeId).collect();
    let mut frontends = Vec::with_capacity(spec.frontends);
    for k in 0..spec.frontends {
        let mut fcfg = FrontendConfig::new(spec.frontend_mode, n, spec.cluster.f);
        fcfg.keys = Some(dir.clone());
        fcfg.stall_timeout = spec.stall_timeout;
        let mut fe = FrontendActor::new(frontend_endpoint(k), ids.clone(), fcfg)
            .expect("keys supplied")
            .retain_blocks(spec.retain_blocks);
        if let Some((_, load)) = spec.loads.iter().find(|(i, _)| *i == k) {
            fe = fe.with_load(load.clone());
        }
        if let Some((_, script)) = spec.scripts.iter().find(|(i, _)| *i == k) {
            fe = fe.with_script(script.clone());
        }
        frontends.push(fe);
    }
    Actors {
        nodes,
        frontends,
        keys,
        directory: dir,
    }
}

impl Scenario {
    pub fn build(spec: ScenarioSpec) -> Self {
        let actors = build_actors(&spec);
        let n = spec.cluster.n;
        let frontends = spec.frontends;
        let mut sim = Simulator::new(spec.sim);
        for node in actors.nodes {
            let id = node.id();
            sim.add_actor(Box::new(node));
            sim.set_signing_key(id, actors.keys[id as usize].clone());
        }
        for fe in actors.frontends {
            sim.add_actor(Box::new(fe));
        }
        Self {
            sim,
            keys: actors.keys,
            directory: actors.directory,
            n,
            frontends,
        }
    }

    pub fn node(&self, id: NodeId) -> &OrderingNode {
        self.sim.actor(id).expect("node exists")
    }

    pub fn frontend(&self, k: usize) -> &FrontendActor {
        self.sim.actor(frontend_endpoint(k)).expect("frontend exists")
    }

    /// Runs until every frontend has delivered each of `expected` envelopes.
    pub fn run_until_delivered(&mut self, expected: usize, deadline: Duration) -> SimReport {
        let frontends = self.frontends;
        self.sim.run_until(deadline, move |sim| {
            (0..frontends).all(|k| {
                sim.actor::<FrontendActor>(frontend_endpoint(k))
                    .is_some_and(|f| f.delivery_counts().len() >= expected)
            })
        })
    }

    /// Checks that no two `correct` nodes decided different batches for an
    /// instance or emitted different blocks at a position, that no two
    /// frontends delivered different blocks for a `(channel, number)`, and
    /// that every retained frontend chain verifies.
    pub fn check_agreement(&self, correct: &BTreeSet<NodeId>) -> Result<AgreementSummary, String> {
        let mut summary = AgreementSummary::default();
        let mut decisions: BTreeMap<u64, (NodeId, Digest)> = BTreeMap::new();
        let mut emitted: BTreeMap<(String, usize), (NodeId, &[u8])> = BTreeMap::new();
        for id in correct {
            let node = self.node(*id);
            for (inst, d) in &node.record().decisions {
                match decisions.get(inst) {
                    Some((other, od)) if od != d => {
                        return Err(format!(
                            "instance {inst}: node {id} and node {other} decided differently"
                        ));
                    }
                    Some(_) => {}
                    None => {
                        decisions.insert(*inst, (*id, *d));
                    }
                }
            }
            for (ch, blocks) in &node.record().emitted {
                for (i, b) in blocks.iter().enumerate() {
                    match emitted.get(&(ch.clone(), i)) {
                        Some((other, ob)) if *ob != b.as_slice() => {
                            return Err(format!(
                                "channel {ch} block {i}: node {id} and node {other} emitted different bytes"
                            ));
                        }
                        Some(_) => {}
                        None => {
                            emitted.insert((ch.clone(), i), (*id, b.as_slice()));
                        }
                    }
                }
            }
        }
        summary.instances = decisions.len();
        let mut delivered: BTreeMap<(String, u64), (usize, Digest)> = BTreeMap::new();
        for k in 0..self.frontends {
            let fe = self.frontend(k);
            for b in fe.delivered() {
                match delivered.get(&(b.channel.clone(), b.number)) {
                    Some((other, d)) if *d != b.digest => {
                        return Err(format!(
                            "channel {} block {}: frontends {k} and {other} delivered different blocks",
                            b.channel, b.number
                        ));
                    }
                    Some(_) => {}
                    None => {
                        delivered.insert((b.channel.clone(), b.number), (k, b.digest));
                    }
                }
            }
            for ch in fe.channels() {
                if let ChainCheck::Broken { number, reason } = verify_chain(fe.blocks(ch), Digest::ZERO) {
                    return Err(format!(
                        "frontend {k} channel {ch}: chain broken at {number}: {reason:?}"
                    ));
                }
                summary.verified_blocks += fe.blocks(ch).len();
            }
        }
        summary.blocks = delivered.len();
        Ok(summary)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgreementSummary {
    pub instances: usize,
    pub blocks: usize,
    pub verified_blocks: usize,
}

/// Envelopes `0..count` of one client, submitted `gap` apart from `start`.
pub fn envelope_script(
    channel: &str,
    client: u64,
    count: u64,
    start: Duration,
    gap: Duration,
    size: usize,
) -> Vec<(Duration, Envelope)> {
    (0..count)
        .map(|s| {
            (
                start + gap * s as u32,
                Envelope::new(channel, client, s, crate::frontend::payload(client, s, size)),
            )
        })
        .collect()
}
