// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Client-side shim: relays envelopes to every node and assembles the
//! blocks the nodes push back.

mod assembly;

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use bytes::Bytes;
use log::warn;

pub use assembly::{
    matching_bytes, Assembler, AssemblerStats, CopyError, CopyOutcome, FrontendConfig, FrontendMode, StallAlarm,
    DEFAULT_GC_GRACE, DEFAULT_STALL_TIMEOUT,
};

use crate::consensus::{Body, ProtocolMessage};
use crate::crypto::{self, Digest, NodeId};
use crate::transport::{Actor, Context, EndpointId};
use crate::types::{Block, ClientId, Envelope};

const TOKEN_CLIENT: u64 = 1 << 32;
const TOKEN_HOUSEKEEPING: u64 = 2 << 32;
const TOKEN_SCRIPT: u64 = 3 << 32;

pub type Handle = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandleStatus {
    Pending,
    Resolved {
        channel: String,
        block_number: u64,
        index: usize,
    },
    /// No node accepted the submission.
    Failed,
}

/// Load produced by the simulated clients of a frontend.
#[derive(Debug, Clone)]
pub struct LoadSpec {
    pub clients: usize,
    /// Outstanding envelopes per client.
    pub in_flight: usize,
    pub envelope_size: usize,
    pub channel: String,
    /// Envelopes per client; `None` for unbounded.
    pub per_client: Option<u64>,
    /// Open-loop mode: each client submits one envelope per interval while
    /// below its in-flight cap. Without it a client resubmits as soon as an
    /// envelope is delivered.
    pub interval: Option<Duration>,
    pub start: Duration,
}

impl LoadSpec {
    pub fn closed(clients: usize, in_flight: usize, envelope_size: usize) -> Self {
        Self {
            clients,
            in_flight,
            envelope_size,
            channel: "ch0".into(),
            per_client: None,
            interval: None,
            start: Duration::ZERO,
        }
    }
}

/// Client id of client `k` behind frontend endpoint `ep`.
pub fn client_id(ep: EndpointId, k: usize) -> ClientId {
    ((ep as u64) << 32) | k as u64
}

/// Deterministic payload of `size` bytes for `(client, seq)`.
pub fn payload(client: ClientId, seq: u64, size: usize) -> Vec<u8> {
    let seed = crypto::hash_parts([client.to_be_bytes().as_slice(), &seq.to_be_bytes()]);
    seed.0.iter().copied().cycle().take(size).collect()
}

#[derive(Debug, Clone)]
struct Submission {
    submitted: Duration,
    status: HandleStatus,
    client: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrontendStats {
    pub submitted: u64,
    pub resolved: u64,
    pub failed: u64,
    pub blocks_delivered: u64,
    pub envelopes_delivered: u64,
    pub duplicate_envelopes: u64,
    pub copy_errors: u64,
}

/// A delivered block as seen by this frontend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredBlock {
    pub channel: String,
    pub number: u64,
    /// Hash of the matching bytes (header and envelope list).
    pub digest: Digest,
    pub at: Duration,
}

/// One block copy as received from a node, kept when blocks are retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedCopy {
    pub from: EndpointId,
    pub channel: String,
    pub number: u64,
    pub digest: Digest,
}

pub struct FrontendActor {
    ep: EndpointId,
    nodes: Vec<NodeId>,
    assembler: Assembler,
    load: Option<LoadSpec>,
    script: Vec<(Duration, Envelope)>,
    client_seq: Vec<u64>,
    client_inflight: Vec<usize>,
    handles: Vec<Submission>,
    waiting: HashMap<(ClientId, u64), Vec<Handle>>,
    seen: HashMap<(ClientId, u64), u32>,
    latencies: Vec<(Duration, Duration)>,
    delivered: Vec<DeliveredBlock>,
    retained: BTreeMap<String, Vec<Block>>,
    copies: Vec<ObservedCopy>,
    retain_blocks: bool,
    alarms: Vec<StallAlarm>,
    housekeeping_armed: bool,
    stats: FrontendStats,
}

impl FrontendActor {
    pub fn new(ep: EndpointId, nodes: Vec<NodeId>, cfg: FrontendConfig) -> Result<Self, CopyError> {
        Ok(Self {
            ep,
            nodes,
            assembler: Assembler::new(cfg)?,
            load: None,
            script: Vec::new(),
            client_seq: Vec::new(),
            client_inflight: Vec::new(),
            handles: Vec::new(),
            waiting: HashMap::new(),
            seen: HashMap::new(),
            latencies: Vec::new(),
            delivered: Vec::new(),
            retained: BTreeMap::new(),
            copies: Vec::new(),
            retain_blocks: false,
            alarms: Vec::new(),
            housekeeping_armed: false,
            stats: FrontendStats::default(),
        })
    }

    pub fn with_load(mut self, load: LoadSpec) -> Self {
        self.client_seq = vec![0; load.clients];
        self.client_inflight = vec![0; load.clients];
        self.load = Some(load);
        self
    }

    /// Envelopes to submit at fixed times.
    pub fn with_script(mut self, script: Vec<(Duration, Envelope)>) -> Self {
        self.script = script;
        self
    }

    pub fn retain_blocks(mut self, yes: bool) -> Self {
        self.retain_blocks = yes;
        self
    }

    /// Every block copy received so far. Empty unless blocks are retained.
    pub fn observed_copies(&self) -> &[ObservedCopy] {
        &self.copies
    }

    pub fn endpoint_id(&self) -> EndpointId {
        self.ep
    }

    pub fn assembler(&self) -> &Assembler {
        &self.assembler
    }

    pub fn stats(&self) -> &FrontendStats {
        &self.stats
    }

    pub fn delivered(&self) -> &[DeliveredBlock] {
        &self.delivered
    }

    pub fn blocks(&self, channel: &str) -> &[Block] {
        self.retained.get(channel).map_or(&[], |v| v.as_slice())
    }

    pub fn channels(&self) -> impl Iterator<Item = &String> {
        self.retained.keys()
    }

    pub fn alarms(&self) -> &[StallAlarm] {
        &self.alarms
    }

    /// `(submit time, submit-to-deliver latency)` for each resolved submission.
    pub fn latencies(&self) -> &[(Duration, Duration)] {
        &self.latencies
    }

    /// Times each `(client, seq)` appeared in a delivered block.
    pub fn delivery_counts(&self) -> &HashMap<(ClientId, u64), u32> {
        &self.seen
    }

    pub fn status(&self, h: Handle) -> Option<&HandleStatus> {
        self.handles.get(h as usize).map(|s| &s.status)
    }

    pub fn handle_count(&self) -> usize {
        self.handles.len()
    }

    pub fn unresolved(&self) -> usize {
        self.handles
            .iter()
            .filter(|s| s.status == HandleStatus::Pending)
            .count()
    }

    /// Sends `env` to every node without waiting for ordering.
    pub fn submit(&mut self, ctx: &mut dyn Context, env: Envelope) -> Handle {
        self.submit_for(ctx, env, None)
    }

    fn submit_for(&mut self, ctx: &mut dyn Context, env: Envelope, client: Option<usize>) -> Handle {
        let h = self.handles.len() as Handle;
        let key = env.key();
        let bytes = ProtocolMessage::new(0, 0, self.ep, Body::Request(env)).encode();
        let accepted = self
            .nodes
            .iter()
            .filter(|n| ctx.send(**n, bytes.clone()).is_ok())
            .count();
        let status = if accepted == 0 {
            self.stats.failed += 1;
            HandleStatus::Failed
        } else {
            self.waiting.entry(key).or_default().push(h);
            HandleStatus::Pending
        };
        self.stats.submitted += 1;
        self.handles.push(Submission {
            submitted: ctx.now(),
            status,
            client,
        });
        h
    }

    fn client_submit(&mut self, ctx: &mut dyn Context, k: usize) {
        let Some(load) = &self.load else { return };
        if self.client_inflight[k] >= load.in_flight {
            return;
        }
        if load.per_client.is_some_and(|max| self.client_seq[k] >= max) {
            return;
        }
        let cid = client_id(self.ep, k);
        let seq = self.client_seq[k];
        let env = Envelope::new(load.channel.clone(), cid, seq, payload(cid, seq, load.envelope_size));
        self.client_seq[k] += 1;
        self.client_inflight[k] += 1;
        self.submit_for(ctx, env, Some(k));
    }

    fn on_delivered(&mut self, ctx: &mut dyn Context, channel: String, block: Block) {
        let now = ctx.now();
        let number = block.header.number;
        self.stats.blocks_delivered += 1;
        self.delivered.push(DeliveredBlock {
            channel: channel.clone(),
            number,
            digest: crypto::hash(&matching_bytes(
                &block.header,
                &crate::types::encode_envelopes(&block.envelopes),
            )),
            at: now,
        });
        let mut refill = Vec::new();
        for (index, env) in block.envelopes.iter().enumerate() {
            let key = env.key();
            let count = self.seen.entry(key).or_default();
            *count += 1;
            self.stats.envelopes_delivered += 1;
            if *count > 1 {
                self.stats.duplicate_envelopes += 1;
                continue;
            }
            for h in self.waiting.remove(&key).unwrap_or_default() {
                let s = &mut self.handles[h as usize];
                s.status = HandleStatus::Resolved {
                    channel: channel.clone(),
                    block_number: number,
                    index,
                };
                self.stats.resolved += 1;
                self.latencies.push((s.submitted, now - s.submitted));
                if let Some(k) = s.client {
                    self.client_inflight[k] -= 1;
                    refill.push(k);
                }
            }
        }
        if self.retain_blocks {
            self.retained.entry(channel).or_default().push(block);
        }
        let closed_loop = self.load.as_ref().is_some_and(|l| l.interval.is_none());
        if closed_loop {
            for k in refill {
                self.client_submit(ctx, k);
            }
        }
    }

    fn housekeeping_interval(&self) -> Duration {
        (self.assembler.config().stall_timeout / 2).max(Duration::from_millis(10))
    }

    /// Housekeeping runs only while assemblies are held, so an idle
    /// frontend leaves no pending events behind.
    fn arm_housekeeping(&mut self, ctx: &mut dyn Context) {
        if !self.housekeeping_armed && self.assembler.pending_assemblies() > 0 {
            self.housekeeping_armed = true;
            ctx.set_timer(self.housekeeping_interval(), TOKEN_HOUSEKEEPING);
        }
    }
}

impl Actor for FrontendActor {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn on_start(&mut self, ctx: &mut dyn Context) {
        let reg = ProtocolMessage::new(0, 0, self.ep, Body::Register).encode();
        for n in &self.nodes {
            let _ = ctx.send(*n, reg.clone());
        }
        if let Some(load) = self.load.clone() {
            for k in 0..load.clients {
                let offset = match load.interval {
                    Some(iv) => iv * k as u32 / load.clients.max(1) as u32,
                    None => Duration::ZERO,
                };
                ctx.set_timer(load.start + offset, TOKEN_CLIENT | k as u64);
            }
        }
        for (i, (at, _)) in self.script.iter().enumerate() {
            ctx.set_timer(*at, TOKEN_SCRIPT | i as u64);
        }
    }

    fn on_message(&mut self, ctx: &mut dyn Context, from: EndpointId, bytes: Bytes) {
        let Ok(msg) = ProtocolMessage::decode(&bytes) else {
            self.stats.copy_errors += 1;
            return;
        };
        let Body::Block(wire) = msg.body else { return };
        if self.retain_blocks {
            if let Ok((channel, block)) = Block::from_wire(&wire) {
                let body = crate::types::encode_envelopes(&block.envelopes);
                self.copies.push(ObservedCopy {
                    from,
                    channel,
                    number: block.header.number,
                    digest: crypto::hash(&matching_bytes(&block.header, &body)),
                });
            }
        }
        let mut out = Vec::new();
        if let Err(e) = self.assembler.on_block_copy(ctx.now(), from, &wire, &mut out) {
            self.stats.copy_errors += 1;
            warn!("frontend {}: {e}", self.ep);
        }
        for (channel, block) in out {
            self.on_delivered(ctx, channel, block);
        }
        self.arm_housekeeping(ctx);
    }

    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64) {
        let idx = (token & 0xFFFF_FFFF) as usize;
        match token & !0xFFFF_FFFF {
            TOKEN_CLIENT => {
                let Some(load) = self.load.clone() else { return };
                match load.interval {
                    Some(iv) => {
                        self.client_submit(ctx, idx);
                        let more = load.per_client.is_none_or(|m| self.client_seq[idx] < m);
                        if more {
                            ctx.set_timer(iv, token);
                        }
                    }
                    None => {
                        for _ in 0..load.in_flight {
                            self.client_submit(ctx, idx);
                        }
                    }
                }
            }
            TOKEN_SCRIPT => {
                if let Some((_, env)) = self.script.get(idx).cloned() {
                    self.submit(ctx, env);
                }
            }
            TOKEN_HOUSEKEEPING => {
                let now = ctx.now();
                let alarms = self.assembler.check_stalls(now);
                for a in &alarms {
                    warn!(
                        "frontend {}: channel {} stalled at block {}",
                        self.ep, a.channel, a.missing
                    );
                }
                self.alarms.extend(alarms);
                self.assembler.gc(now);
                self.housekeeping_armed = false;
                self.arm_housekeeping(ctx);
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
