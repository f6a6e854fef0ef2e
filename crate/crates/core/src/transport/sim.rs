// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event network simulator.
//!
//! Single-threaded. Each actor has an event loop that is busy for the
//! virtual CPU time charged by the cost model, a pool of offload workers
//! and a NIC that serialises its outgoing bytes. Latencies come from a
//! seeded RNG, events are ordered by `(time, sequence)`, so a given
//! configuration, seed and fault script always produce the same trace.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use super::faults::{Behavior, Directive, FaultScript};
use super::latency::LatencyMatrix;
use super::{is_frontend, Actor, Context, CostModel, EndpointId, Job};
use crate::consensus::{Batch, Body, Kind, ProtocolMessage};
use crate::crypto::{Digest, KeyPair, NodeId};
use crate::error::TransportError;
use crate::frontend::FrontendActor;
use crate::metrics::Percentiles;
use crate::node::OrderingNode;
use crate::types::{data_hash, Block};

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub seed: u64,
    pub latency: LatencyMatrix,
    pub costs: CostModel,
    pub faults: FaultScript,
}

impl SimOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            latency: LatencyMatrix::uniform(0.0, 0.0),
            costs: CostModel::free(),
            faults: FaultScript::none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimStatus {
    /// The condition became true.
    Complete,
    /// The event queue ran dry before the condition held.
    Incomplete,
    /// The deadline passed before the condition held.
    Deadline,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimStats {
    pub events: u64,
    pub sent: u64,
    pub dropped: u64,
    pub bytes: u64,
    pub by_kind: BTreeMap<&'static str, u64>,
    pub sends_by_endpoint: BTreeMap<EndpointId, u64>,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub status: SimStatus,
    pub virtual_time: Duration,
    pub stats: SimStats,
    pub trace_hash: Digest,
    /// Highest decided instance per node.
    pub decided: BTreeMap<EndpointId, u64>,
    /// Submit-to-deliver latency per frontend.
    pub latency: BTreeMap<EndpointId, Option<Percentiles>>,
}

impl SimReport {
    pub fn is_complete(&self) -> bool {
        self.status == SimStatus::Complete
    }
}

enum Event {
    Start {
        to: EndpointId,
    },
    Deliver {
        from: EndpointId,
        to: EndpointId,
        bytes: Bytes,
    },
    Timer {
        to: EndpointId,
        token: u64,
    },
    Offload {
        to: EndpointId,
        tag: u64,
        result: Vec<u8>,
    },
}

#[derive(Debug, Default)]
struct ByzState {
    behavior: Option<Behavior>,
    /// Per instance: digest of the real batch and of the variant sent to odd replicas.
    equivocation: BTreeMap<u64, (Digest, Option<Digest>)>,
    crash_after: Option<(u64, BTreeSet<NodeId>)>,
    triggered: bool,
    key: Option<Arc<KeyPair>>,
}

#[derive(Debug)]
struct Slot {
    busy_until: Duration,
    workers: Vec<Duration>,
    nic_free: Duration,
    crashed_at: Option<Duration>,
    byz: ByzState,
}

impl Slot {
    fn crashed(&self, t: Duration) -> bool {
        self.crashed_at.is_some_and(|c| t >= c)
    }
}

struct Core {
    now: Duration,
    seq: u64,
    queue: BTreeMap<(Duration, u64), Event>,
    rng: ChaCha8Rng,
    latency: LatencyMatrix,
    costs: CostModel,
    partitions: Vec<(BTreeSet<EndpointId>, Duration, Duration)>,
    loss: f64,
    link_last: BTreeMap<(EndpointId, EndpointId), Duration>,
    slots: BTreeMap<EndpointId, Slot>,
    stats: SimStats,
    trace: Sha256,
}

impl Core {
    fn schedule(&mut self, at: Duration, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn send(
        &mut self,
        from: EndpointId,
        local: &mut Duration,
        to: EndpointId,
        bytes: Bytes,
        prepaid: bool,
    ) -> Result<(), TransportError> {
        if !self.slots.contains_key(&to) {
            return Err(TransportError::UnknownEndpoint(to));
        }
        if !prepaid {
            *local += self.costs.send_cost(bytes.len());
        }
        let at = *local;
        let slot = self.slots.get_mut(&from).expect("sender registered");
        if slot.crashed(at) {
            return Ok(());
        }
        let Some(bytes) = interpose(&mut slot.byz, from, to, bytes) else {
            self.stats.dropped += 1;
            return Ok(());
        };
        let cut = self
            .partitions
            .iter()
            .any(|(g, a, b)| at >= *a && at < *b && g.contains(&from) != g.contains(&to));
        if cut || (self.loss > 0.0 && self.rng.random_bool(self.loss)) {
            self.stats.dropped += 1;
            return Ok(());
        }
        let slot = self.slots.get_mut(&from).expect("sender registered");
        let depart = at.max(slot.nic_free) + self.costs.wire_time(bytes.len());
        slot.nic_free = depart;
        let mut arrive = depart + self.latency.sample(from, to, &mut self.rng);
        let last = self.link_last.entry((from, to)).or_default();
        arrive = arrive.max(*last);
        *last = arrive;

        self.stats.sent += 1;
        self.stats.bytes += bytes.len() as u64;
        let kind = bytes
            .first()
            .and_then(|b| Kind::from_u8(*b).ok())
            .map_or("RAW", |k| k.name());
        *self.stats.by_kind.entry(kind).or_default() += 1;
        *self.stats.sends_by_endpoint.entry(from).or_default() += 1;
        self.schedule(arrive, Event::Deliver { from, to, bytes });
        Ok(())
    }
}

/// Applies a Byzantine behaviour to one outgoing message; `None` drops it.
fn interpose(byz: &mut ByzState, from: EndpointId, to: EndpointId, bytes: Bytes) -> Option<Bytes> {
    if byz.behavior.is_none() && byz.crash_after.is_none() {
        return Some(bytes);
    }
    if byz.behavior == Some(Behavior::Mute) {
        return None;
    }
    let Ok(mut msg) = ProtocolMessage::decode(&bytes) else {
        return Some(bytes);
    };
    if let Some((instance, reach)) = &byz.crash_after {
        if byz.triggered {
            let allowed =
                msg.instance == *instance && matches!(msg.kind(), Kind::Propose | Kind::Write) && reach.contains(&to);
            return allowed.then_some(bytes);
        }
        if msg.kind() == Kind::Propose && msg.instance == *instance {
            byz.triggered = true;
            return reach.contains(&to).then_some(bytes);
        }
        return Some(bytes);
    }
    match byz.behavior? {
        Behavior::Mute => None,
        Behavior::EquivocatePropose => {
            if is_frontend(to) || to.is_multiple_of(2) {
                if let Body::Propose(b) = &msg.body {
                    byz.equivocation.entry(msg.instance).or_insert((b.digest, None));
                }
                return Some(bytes);
            }
            match &msg.body {
                Body::Propose(b) => {
                    if b.len() < 2 {
                        byz.equivocation.insert(msg.instance, (b.digest, None));
                        return None;
                    }
                    let mut envs = b.envelopes.clone();
                    envs.pop();
                    let alt = Arc::new(Batch::new(envs));
                    byz.equivocation.insert(msg.instance, (b.digest, Some(alt.digest)));
                    msg.body = Body::Propose(alt);
                    Some(msg.encode())
                }
                Body::Write(d) | Body::Accept(d) => {
                    let swap = match byz.equivocation.get(&msg.instance) {
                        Some((real, Some(alt))) if real == d => *alt,
                        _ => return Some(bytes),
                    };
                    msg.body = match msg.body {
                        Body::Write(_) => Body::Write(swap),
                        _ => Body::Accept(swap),
                    };
                    Some(msg.encode())
                }
                _ => Some(bytes),
            }
        }
        Behavior::AlterBlock => {
            let Body::Block(wire) = &msg.body else {
                return Some(bytes);
            };
            let Ok((channel, mut block)) = Block::from_wire(wire) else {
                return Some(bytes);
            };
            alter(&mut block, from, byz.key.as_deref());
            msg.body = Body::Block(Bytes::from(block.to_wire(&channel)));
            Some(msg.encode())
        }
    }
}

fn alter(block: &mut Block, node: EndpointId, key: Option<&KeyPair>) {
    match block.envelopes.last_mut() {
        Some(e) => e.payload.push(0xA5),
        None => block.header.prev_hash.0[0] ^= 1,
    }
    block.header.data_hash = data_hash(&block.envelopes);
    block.signatures.clear();
    if let Some(k) = key {
        block.sign_with(node, k);
    } else {
        block.signatures.insert(node, vec![0u8; crate::crypto::SIGNATURE_LEN]);
    }
}

struct SimCtx<'a> {
    core: &'a mut Core,
    me: EndpointId,
    local: Duration,
}

impl Context for SimCtx<'_> {
    fn now(&self) -> Duration {
        self.local
    }

    fn send(&mut self, to: EndpointId, bytes: Bytes) -> Result<(), TransportError> {
        self.core.send(self.me, &mut self.local, to, bytes, false)
    }

    fn send_prepaid(&mut self, to: EndpointId, bytes: Bytes) -> Result<(), TransportError> {
        self.core.send(self.me, &mut self.local, to, bytes, true)
    }

    fn set_timer(&mut self, after: Duration, token: u64) {
        let at = self.local + after;
        self.core.schedule(at, Event::Timer { to: self.me, token });
    }

    fn offload(&mut self, job: Job, cost: Duration, tag: u64) {
        let result = job();
        let slot = self.core.slots.get_mut(&self.me).expect("registered");
        let (i, free) = slot
            .workers
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|(i, t)| (*t, *i))
            .expect("at least one worker");
        let done = self.local.max(free) + cost;
        slot.workers[i] = done;
        self.core.schedule(
            done,
            Event::Offload {
                to: self.me,
                tag,
                result,
            },
        );
    }

    fn charge(&mut self, cost: Duration) {
        self.local += cost;
    }
}

pub struct Simulator {
    core: Core,
    actors: BTreeMap<EndpointId, Box<dyn Actor>>,
    faults: FaultScript,
}

impl Simulator {
    pub fn new(opts: SimOptions) -> Self {
        let mut partitions = Vec::new();
        let mut loss = 0.0;
        for d in &opts.faults.directives {
            match d {
                Directive::Partition { group, from, until } => partitions.push((group.clone(), *from, *until)),
                Directive::Loss { probability } => loss = *probability,
                _ => {}
            }
        }
        Self {
            core: Core {
                now: Duration::ZERO,
                seq: 0,
                queue: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(opts.seed),
                latency: opts.latency,
                costs: opts.costs,
                partitions,
                loss,
                link_last: BTreeMap::new(),
                slots: BTreeMap::new(),
                stats: SimStats::default(),
                trace: Sha256::new(),
            },
            actors: BTreeMap::new(),
            faults: opts.faults,
        }
    }

    pub fn add_actor(&mut self, actor: Box<dyn Actor>) {
        let ep = actor.endpoint();
        let mut slot = Slot {
            busy_until: Duration::ZERO,
            workers: vec![Duration::ZERO; actor.workers().max(1)],
            nic_free: Duration::ZERO,
            crashed_at: None,
            byz: ByzState::default(),
        };
        for d in &self.faults.directives {
            match d {
                Directive::Crash { node, at } if *node == ep => {
                    slot.crashed_at = Some(slot.crashed_at.map_or(*at, |c| c.min(*at)));
                }
                Directive::Byzantine { node, behavior } if *node == ep => slot.byz.behavior = Some(*behavior),
                Directive::CrashAfterPropose { node, instance, reach } if *node == ep => {
                    slot.byz.crash_after = Some((*instance, reach.clone()));
                }
                _ => {}
            }
        }
        self.core.slots.insert(ep, slot);
        self.actors.insert(ep, actor);
        self.core.schedule(Duration::ZERO, Event::Start { to: ep });
    }

    /// Key used by an `alter-block` node to re-sign altered blocks.
    pub fn set_signing_key(&mut self, ep: EndpointId, key: Arc<KeyPair>) {
        if let Some(slot) = self.core.slots.get_mut(&ep) {
            slot.byz.key = Some(key);
        }
    }

    /// Crashes `ep` at the current time.
    pub fn crash(&mut self, ep: EndpointId) {
        let now = self.core.now;
        if let Some(slot) = self.core.slots.get_mut(&ep) {
            slot.crashed_at = Some(slot.crashed_at.map_or(now, |c| c.min(now)));
        }
    }

    pub fn is_crashed(&self, ep: EndpointId) -> bool {
        self.core.slots.get(&ep).is_some_and(|s| s.crashed(self.core.now))
    }

    pub fn now(&self) -> Duration {
        self.core.now
    }

    pub fn stats(&self) -> &SimStats {
        &self.core.stats
    }

    pub fn endpoints(&self) -> impl Iterator<Item = EndpointId> + '_ {
        self.actors.keys().copied()
    }

    pub fn actor<T: 'static>(&self, ep: EndpointId) -> Option<&T> {
        self.actors.get(&ep)?.as_any().downcast_ref()
    }

    pub fn actor_mut<T: 'static>(&mut self, ep: EndpointId) -> Option<&mut T> {
        self.actors.get_mut(&ep)?.as_any_mut().downcast_mut()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &OrderingNode> {
        self.actors.values().filter_map(|a| a.as_any().downcast_ref())
    }

    pub fn frontends(&self) -> impl Iterator<Item = &FrontendActor> {
        self.actors.values().filter_map(|a| a.as_any().downcast_ref())
    }

    /// Processes one event; false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((t, _), ev)) = self.core.queue.pop_first() else {
            return false;
        };
        self.core.now = t;
        self.core.stats.events += 1;
        let to = match &ev {
            Event::Start { to } | Event::Deliver { to, .. } | Event::Timer { to, .. } | Event::Offload { to, .. } => {
                *to
            }
        };
        let h = &mut self.core.trace;
        h.update(t.as_nanos().to_be_bytes());
        h.update(to.to_be_bytes());
        match &ev {
            Event::Start { .. } => h.update([0u8]),
            Event::Deliver { from, bytes, .. } => {
                h.update([1u8]);
                h.update(from.to_be_bytes());
                h.update(bytes);
            }
            Event::Timer { token, .. } => {
                h.update([2u8]);
                h.update(token.to_be_bytes());
            }
            Event::Offload { tag, result, .. } => {
                h.update([3u8]);
                h.update(tag.to_be_bytes());
                h.update(result);
            }
        }

        let slot = self.core.slots.get(&to).expect("registered");
        if slot.crashed(t) {
            return true;
        }
        let mut local = t.max(slot.busy_until);
        let Some(mut actor) = self.actors.remove(&to) else {
            return true;
        };
        if let Event::Deliver { bytes, .. } = &ev {
            local += self.core.costs.receive_cost(bytes.len());
        }
        let mut ctx = SimCtx {
            core: &mut self.core,
            me: to,
            local,
        };
        match ev {
            Event::Start { .. } => actor.on_start(&mut ctx),
            Event::Deliver { from, bytes, .. } => actor.on_message(&mut ctx, from, bytes),
            Event::Timer { token, .. } => actor.on_timer(&mut ctx, token),
            Event::Offload { tag, result, .. } => actor.on_offload_done(&mut ctx, tag, result),
        }
        let local = ctx.local;
        self.actors.insert(to, actor);
        let slot = self.core.slots.get_mut(&to).expect("registered");
        slot.busy_until = local;
        if slot.byz.triggered && slot.crashed_at.is_none() {
            slot.crashed_at = Some(local);
        }
        true
    }

    /// Runs until `done` holds, the queue empties, or virtual time passes `deadline`.
    pub fn run_until(&mut self, deadline: Duration, mut done: impl FnMut(&Simulator) -> bool) -> SimReport {
        let status = loop {
            if done(self) {
                break SimStatus::Complete;
            }
            match self.core.queue.first_key_value() {
                None => break SimStatus::Incomplete,
                Some(((t, _), _)) if *t > deadline => {
                    self.core.now = deadline;
                    break SimStatus::Deadline;
                }
                Some(_) => {
                    self.step();
                }
            }
        };
        self.report(status)
    }

    pub fn run_for(&mut self, span: Duration) -> SimReport {
        let deadline = self.core.now + span;
        let mut r = self.run_until(deadline, |_| false);
        if r.status == SimStatus::Deadline {
            r.status = SimStatus::Complete;
        }
        r
    }

    pub fn trace_hash(&self) -> Digest {
        Digest(self.core.trace.clone().finalize().into())
    }

    pub fn report(&self, status: SimStatus) -> SimReport {
        SimReport {
            status,
            virtual_time: self.core.now,
            stats: self.core.stats.clone(),
            trace_hash: self.trace_hash(),
            decided: self.nodes().map(|n| (n.id(), n.replica().last_decided())).collect(),
            latency: self
                .frontends()
                .map(|f| (f.endpoint_id(), Percentiles::of(f.latencies().iter().map(|(_, l)| *l))))
                .collect(),
        }
    }
}
