// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use log::{debug, error, warn};

use super::checkpoint::CheckpointStore;
use super::cutter::{is_ttc, ttc_envelope, CutBlock, OrderingState};
use super::NodeConfig;
use crate::consensus::{Action, Body, Delivery, ProtocolMessage, Replica, ReplicaTimer, TimerKind};
use crate::crypto::{self, Digest, NodeId};
use crate::transport::{is_frontend, Actor, Context, EndpointId};
use crate::types::{encode_envelopes, Block, Envelope};

const TOKEN_BATCH: u64 = 1;
const TOKEN_SUSPICION: u64 = 2;
const TOKEN_FLUSH: u64 = 3;
const TOKEN_SHIFT: u32 = 60;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub blocks_cut: u64,
    pub blocks_emitted: u64,
    pub block_sends: u64,
    pub envelopes_final: u64,
    pub tentative_blocks_discarded: u64,
    pub rollbacks_applied: u64,
    pub ttc_submitted: u64,
    pub rejected_registrations: u64,
    pub malformed: u64,
    pub checkpoints: u64,
}

/// Observations kept for tests and benchmarks.
#[derive(Debug, Clone, Default)]
pub struct NodeRecord {
    /// Digest of the envelope list finally delivered per instance.
    pub decisions: BTreeMap<u64, Digest>,
    /// Unsigned encoding of every emitted block, per channel, in emission order.
    pub emitted: BTreeMap<String, Vec<Vec<u8>>>,
    /// Time and number of client envelopes of each final delivery.
    pub final_log: Vec<(Duration, u32)>,
    /// Time and envelope count of each block sent to the frontends.
    pub emit_log: Vec<(Duration, u32)>,
}

#[derive(Debug)]
struct PendingBlock {
    channel: String,
    block: Block,
    instance: u64,
    is_final: bool,
    signature: Option<Vec<u8>>,
}

pub struct OrderingNode {
    cfg: NodeConfig,
    replica: Replica,
    working: OrderingState,
    /// State before the outstanding tentative delivery, if any.
    snapshot: Option<OrderingState>,
    tentative: Option<(u64, Arc<Vec<Envelope>>)>,
    store: CheckpointStore,
    next_tag: u64,
    pending: BTreeMap<u64, PendingBlock>,
    emit_next: BTreeMap<String, u64>,
    ready: BTreeMap<(String, u64), Block>,
    registered: BTreeSet<EndpointId>,
    buffered_since: BTreeMap<String, Duration>,
    ttc_requested: BTreeMap<String, u64>,
    ttc_seq: u64,
    flush_armed: bool,
    stats: NodeStats,
    record: NodeRecord,
}

impl OrderingNode {
    pub fn new(cfg: NodeConfig) -> Self {
        let store = match &cfg.checkpoint_dir {
            Some(dir) => CheckpointStore::open(dir, cfg.checkpoint_period, cfg.block_size).unwrap_or_else(|e| {
                error!(
                    "node {}: checkpoint dir unusable ({e}); keeping checkpoints in memory",
                    cfg.id
                );
                CheckpointStore::in_memory(cfg.checkpoint_period, cfg.block_size)
            }),
            None => CheckpointStore::in_memory(cfg.checkpoint_period, cfg.block_size),
        };
        Self {
            replica: Replica::new(cfg.id, cfg.cluster.clone()),
            working: OrderingState::new(cfg.block_size),
            snapshot: None,
            tentative: None,
            store,
            next_tag: 0,
            pending: BTreeMap::new(),
            emit_next: BTreeMap::new(),
            ready: BTreeMap::new(),
            registered: BTreeSet::new(),
            buffered_since: BTreeMap::new(),
            ttc_requested: BTreeMap::new(),
            ttc_seq: 0,
            flush_armed: false,
            stats: NodeStats::default(),
            record: NodeRecord::default(),
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn record(&self) -> &NodeRecord {
        &self.record
    }

    pub fn ordering_state(&self) -> &OrderingState {
        &self.working
    }

    pub fn store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn registered_frontends(&self) -> &BTreeSet<EndpointId> {
        &self.registered
    }

    // ---------------------------------------------------------------- consensus glue

    fn run_actions(&mut self, ctx: &mut dyn Context, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Broadcast(m) => {
                    let bytes = m.encode();
                    for n in self.cfg.cluster.nodes() {
                        if n != self.cfg.id {
                            let _ = ctx.send(n, bytes.clone());
                        }
                    }
                }
                Action::Send(to, m) => {
                    let _ = ctx.send(to, m.encode());
                }
                Action::SetTimer { timer, after } => {
                    let kind = match timer.kind {
                        TimerKind::Batch => TOKEN_BATCH,
                        TimerKind::Suspicion => TOKEN_SUSPICION,
                    };
                    ctx.set_timer(after, (kind << TOKEN_SHIFT) | timer.generation);
                }
                Action::Deliver(d) => self.on_delivery(ctx, d),
            }
        }
    }

    fn on_delivery(&mut self, ctx: &mut dyn Context, d: Delivery) {
        match d {
            Delivery::Tentative { instance, envelopes } => {
                self.snapshot = Some(self.working.clone());
                let cut = self.working.apply(instance, &envelopes);
                self.tentative = Some((instance, envelopes));
                self.start_signing(ctx, cut, false);
            }
            Delivery::Confirm { instance } => {
                self.snapshot = None;
                let Some((inst, envelopes)) = self.tentative.take() else {
                    error!("node {}: confirm of {instance} without tentative delivery", self.cfg.id);
                    return;
                };
                debug_assert_eq!(inst, instance);
                let tags: Vec<u64> = self
                    .pending
                    .iter()
                    .filter(|(_, p)| p.instance == instance)
                    .map(|(t, _)| *t)
                    .collect();
                for t in tags {
                    if let Some(p) = self.pending.get_mut(&t) {
                        p.is_final = true;
                    }
                    self.try_release(ctx, t);
                }
                self.finalize(ctx.now(), instance, &envelopes);
            }
            Delivery::Final { instance, envelopes } => {
                let cut = self.working.apply(instance, &envelopes);
                self.start_signing(ctx, cut, true);
                self.finalize(ctx.now(), instance, &envelopes);
            }
            Delivery::Rollback { last_final } => {
                debug!("node {} rolls back to instance {last_final}", self.cfg.id);
                if let Some(s) = self.snapshot.take() {
                    self.working = s;
                }
                self.tentative = None;
                let before = self.pending.len();
                self.pending.retain(|_, p| p.is_final);
                self.stats.tentative_blocks_discarded += (before - self.pending.len()) as u64;
                self.stats.rollbacks_applied += 1;
            }
        }
        self.track_buffers(ctx);
    }

    fn finalize(&mut self, now: Duration, instance: u64, envelopes: &[Envelope]) {
        let clients = envelopes.iter().filter(|e| !is_ttc(e)).count() as u32;
        self.stats.envelopes_final += clients as u64;
        self.record.final_log.push((now, clients));
        if self.cfg.record {
            self.record
                .decisions
                .insert(instance, crypto::hash(&encode_envelopes(envelopes)));
        }
        if let Err(e) = self.store.append(instance, envelopes) {
            error!("node {}: log append failed: {e}", self.cfg.id);
        }
        match self.store.maybe_checkpoint(&self.working) {
            Ok(true) => self.stats.checkpoints += 1,
            Ok(false) => {}
            Err(e) => error!("node {}: checkpoint failed: {e}", self.cfg.id),
        }
    }

    // ---------------------------------------------------------------- signing and dissemination

    fn start_signing(&mut self, ctx: &mut dyn Context, cut: Vec<CutBlock>, is_final: bool) {
        for c in cut {
            self.stats.blocks_cut += 1;
            let block = Block {
                header: c.header,
                envelopes: c.envelopes,
                signatures: BTreeMap::new(),
            };
            let tag = self.next_tag;
            self.next_tag += 1;
            let wire_len = block.to_wire(&c.channel).len() + 2 + 2 + crypto::SIGNATURE_LEN;
            let fanout: Duration = self.registered.iter().map(|_| self.cfg.costs.send_cost(wire_len)).sum();
            let header = block.header.to_bytes();
            let signer = self.cfg.signer.clone();
            ctx.offload(Box::new(move || signer.sign(&header)), self.cfg.sign_cost + fanout, tag);
            self.pending.insert(
                tag,
                PendingBlock {
                    channel: c.channel,
                    block,
                    instance: c.instance,
                    is_final,
                    signature: None,
                },
            );
        }
    }

    fn try_release(&mut self, ctx: &mut dyn Context, tag: u64) {
        let ready = self
            .pending
            .get(&tag)
            .is_some_and(|p| p.is_final && p.signature.is_some());
        if !ready {
            return;
        }
        let p = self.pending.remove(&tag).expect("checked above");
        let mut block = p.block;
        block
            .signatures
            .insert(self.cfg.id, p.signature.expect("checked above"));
        let channel = p.channel;
        self.ready.insert((channel.clone(), block.header.number), block);
        self.flush_ready(ctx, &channel);
    }

    /// Sends ready blocks of `channel` to every registered frontend in number order.
    fn flush_ready(&mut self, ctx: &mut dyn Context, channel: &str) {
        loop {
            let next = *self.emit_next.get(channel).unwrap_or(&0);
            let Some(block) = self.ready.remove(&(channel.to_string(), next)) else {
                return;
            };
            let msg = ProtocolMessage::new(next, 0, self.cfg.id, Body::Block(Bytes::from(block.to_wire(channel))));
            let bytes = msg.encode();
            for fe in &self.registered {
                if ctx.send_prepaid(*fe, bytes.clone()).is_ok() {
                    self.stats.block_sends += 1;
                }
            }
            self.stats.blocks_emitted += 1;
            self.record.emit_log.push((ctx.now(), block.envelopes.len() as u32));
            if self.cfg.record {
                let unsigned = Block {
                    header: block.header,
                    envelopes: block.envelopes,
                    signatures: BTreeMap::new(),
                };
                self.record
                    .emitted
                    .entry(channel.to_string())
                    .or_default()
                    .push(unsigned.to_bytes());
            }
            self.emit_next.insert(channel.to_string(), next + 1);
        }
    }

    // ---------------------------------------------------------------- flush timeout

    fn track_buffers(&mut self, ctx: &mut dyn Context) {
        let now = ctx.now();
        for (id, ch) in &self.working.channels {
            if ch.cutter.buffer.is_empty() {
                self.buffered_since.remove(id);
            } else {
                self.buffered_since.entry(id.clone()).or_insert(now);
            }
        }
        self.buffered_since
            .retain(|id, _| self.working.channels.contains_key(id));
        self.arm_flush(ctx);
    }

    fn flush_interval(&self) -> Duration {
        (self.cfg.flush_timeout / 4).max(Duration::from_millis(1))
    }

    fn arm_flush(&mut self, ctx: &mut dyn Context) {
        if !self.flush_armed && !self.buffered_since.is_empty() {
            self.flush_armed = true;
            ctx.set_timer(self.flush_interval(), TOKEN_FLUSH << TOKEN_SHIFT);
        }
    }

    fn flush_check(&mut self, ctx: &mut dyn Context) {
        self.flush_armed = false;
        let now = ctx.now();
        let due: Vec<(String, u64)> = self
            .buffered_since
            .iter()
            .filter(|(_, since)| now >= **since + self.cfg.flush_timeout)
            .filter_map(|(id, _)| {
                let target = self.working.node_state(id)?.next_block_number;
                (self.ttc_requested.get(id) != Some(&target)).then(|| (id.clone(), target))
            })
            .collect();
        for (channel, target) in due {
            self.ttc_requested.insert(channel.clone(), target);
            let env = ttc_envelope(&channel, self.cfg.id, self.ttc_seq, target);
            self.ttc_seq += 1;
            self.stats.ttc_submitted += 1;
            let req = ProtocolMessage::new(0, 0, self.cfg.id, Body::Request(env.clone()));
            self.run_actions(ctx, vec![Action::Broadcast(req)]);
            let (_, actions) = self.replica.submit_request(now, env);
            self.run_actions(ctx, actions);
        }
        self.arm_flush(ctx);
    }
}

impl Actor for OrderingNode {
    fn endpoint(&self) -> EndpointId {
        self.cfg.id
    }

    fn workers(&self) -> usize {
        self.cfg.signing_workers.max(1)
    }

    fn on_start(&mut self, _ctx: &mut dyn Context) {}

    fn on_message(&mut self, ctx: &mut dyn Context, from: EndpointId, bytes: Bytes) {
        let msg = match ProtocolMessage::decode(&bytes) {
            Ok(m) => m,
            Err(e) => {
                self.stats.malformed += 1;
                warn!("node {}: malformed message from {from}: {e}", self.cfg.id);
                return;
            }
        };
        let now = ctx.now();
        if is_frontend(from) {
            match msg.body {
                Body::Request(env) if env.validate().is_ok() && !is_ttc(&env) => {
                    let (_, actions) = self.replica.submit_request(now, env);
                    self.run_actions(ctx, actions);
                }
                Body::Register => {
                    if self.cfg.frontends.contains(&from) {
                        self.registered.insert(from);
                    } else {
                        self.stats.rejected_registrations += 1;
                        warn!("node {}: registration from unknown frontend {from}", self.cfg.id);
                    }
                }
                _ => {}
            }
            return;
        }
        if msg.sender != from {
            self.stats.malformed += 1;
            return;
        }
        let actions = self.replica.handle_message(now, msg);
        self.run_actions(ctx, actions);
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        let kind = token >> TOKEN_SHIFT;
        let generation = token & ((1 << TOKEN_SHIFT) - 1);
        let timer = |kind| ReplicaTimer { kind, generation };
        match kind {
            TOKEN_BATCH => {
                let actions = self.replica.on_timer(ctx.now(), timer(TimerKind::Batch));
                self.run_actions(ctx, actions);
            }
            TOKEN_SUSPICION => {
                let actions = self.replica.on_timer(ctx.now(), timer(TimerKind::Suspicion));
                self.run_actions(ctx, actions);
            }
            TOKEN_FLUSH => self.flush_check(ctx),
            _ => {}
        }
    }

    fn on_offload_done(&mut self, ctx: &mut dyn Context, tag: u64, result: Vec<u8>) {
        // Results of blocks discarded by a rollback are dropped here.
        if let Some(p) = self.pending.get_mut(&tag) {
            p.signature = Some(result);
            self.try_release(ctx, tag);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
