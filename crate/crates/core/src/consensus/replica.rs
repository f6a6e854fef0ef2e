// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Replica-side consensus state machine.
//!
//! The replica is sans-IO: every input (`submit_request`, `handle_message`,
//! `on_timer`) takes the current time and returns the actions the caller
//! must carry out. Consensus instances run one at a time; a leader
//! proposes instance `i + 1` only after deciding `i`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, trace};

use super::config::ClusterConfig;
use super::instance::{ConsensusInstance, Phase};
use super::message::{Batch, Body, ProtocolMessage, StopData, SyncPlan};
use super::pool::{DecidedFilter, RequestPool};
use super::sync::{choose_reports, compute_plan};
use crate::crypto::{Digest, NodeId};
use crate::types::{ClientId, Envelope};

/// WRITE/ACCEPT/PROPOSE for instances more than this far ahead are dropped.
pub const MAX_AHEAD: u64 = 2;
/// Decided batches carried in a STOPDATA report.
pub const STOPDATA_TAIL: usize = 32;
const DECIDED_DIGESTS_KEPT: usize = 4096;
const MAX_DEFERRED: usize = 16_384;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    /// Batch delivered after the WRITE phase (tentative mode only).
    Tentative {
        instance: u64,
        envelopes: Arc<Vec<Envelope>>,
    },
    /// Batch delivered as final decision without a prior tentative delivery.
    Final {
        instance: u64,
        envelopes: Arc<Vec<Envelope>>,
    },
    /// The tentatively delivered batch of `instance` is now final.
    Confirm { instance: u64 },
    /// Retract every tentative delivery after `last_final`.
    Rollback { last_final: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    Batch,
    Suspicion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReplicaTimer {
    pub kind: TimerKind,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send to every other replica.
    Broadcast(ProtocolMessage),
    Send(NodeId, ProtocolMessage),
    Deliver(Delivery),
    SetTimer {
        timer: ReplicaTimer,
        after: Duration,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestAck {
    Accepted,
    Duplicate,
    AlreadyDecided,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    pub proposals: u64,
    pub decided_instances: u64,
    pub regency_changes: u64,
    pub rollbacks: u64,
    pub equivocations_seen: u64,
    pub invalid_proposals: u64,
    pub fetches: u64,
}

#[derive(Debug, Default)]
struct SyncRound {
    reports: BTreeMap<NodeId, StopData>,
    /// SYNC received from the leader, waiting for the reports it names.
    pending: Option<SyncPlan>,
    plan_sent: bool,
    started: Duration,
}

pub struct Replica {
    id: NodeId,
    cfg: Arc<ClusterConfig>,
    regency: u64,
    stops: BTreeMap<u64, BTreeSet<NodeId>>,
    stop_sent_for: u64,
    stop_sent_at: Duration,
    sync: Option<SyncRound>,
    pool: RequestPool,
    decided: DecidedFilter,
    last_decided: u64,
    decided_tail: VecDeque<(u64, Arc<Batch>)>,
    decided_digests: BTreeMap<u64, Digest>,
    current: ConsensusInstance,
    ahead: BTreeMap<u64, ConsensusInstance>,
    /// Entries of the adopted synchronization plan not yet decided.
    plan: BTreeMap<u64, Arc<Batch>>,
    deferred: Vec<ProtocolMessage>,
    batch_gen: u64,
    batch_armed: bool,
    suspicion_gen: u64,
    suspicion_armed: bool,
    last_progress: Duration,
    now: Duration,
    stats: ReplicaStats,
    out: Vec<Action>,
}

impl Replica {
    pub fn new(id: NodeId, cfg: Arc<ClusterConfig>) -> Self {
        Self {
            id,
            cfg,
            regency: 0,
            stops: BTreeMap::new(),
            stop_sent_for: 0,
            stop_sent_at: Duration::ZERO,
            sync: None,
            pool: RequestPool::new(),
            decided: DecidedFilter::default(),
            last_decided: 0,
            decided_tail: VecDeque::new(),
            decided_digests: BTreeMap::new(),
            current: ConsensusInstance::new(1, 0),
            ahead: BTreeMap::new(),
            plan: BTreeMap::new(),
            deferred: Vec::new(),
            batch_gen: 0,
            batch_armed: false,
            suspicion_gen: 0,
            suspicion_armed: false,
            last_progress: Duration::ZERO,
            now: Duration::ZERO,
            stats: ReplicaStats::default(),
            out: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn regency(&self) -> u64 {
        self.regency
    }

    pub fn leader(&self) -> NodeId {
        self.cfg.leader_of(self.regency)
    }

    pub fn is_leader(&self) -> bool {
        self.leader() == self.id
    }

    pub fn last_decided(&self) -> u64 {
        self.last_decided
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn current_instance(&self) -> &ConsensusInstance {
        &self.current
    }

    pub fn stats(&self) -> &ReplicaStats {
        &self.stats
    }

    pub fn is_synchronizing(&self) -> bool {
        self.sync.is_some()
    }

    fn take_out(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.out)
    }

    fn msg(&self, instance: u64, body: Body) -> ProtocolMessage {
        ProtocolMessage::new(instance, self.regency, self.id, body)
    }

    // ---------------------------------------------------------------- requests

    /// Adds a client request to the pending pool.
    pub fn submit_request(&mut self, now: Duration, env: Envelope) -> (RequestAck, Vec<Action>) {
        self.now = now;
        let ack = self.add_request(env);
        if ack == RequestAck::Accepted {
            self.try_propose();
            self.arm_suspicion();
        }
        (ack, self.take_out())
    }

    fn add_request(&mut self, env: Envelope) -> RequestAck {
        if self.decided.contains(env.key()) {
            return RequestAck::AlreadyDecided;
        }
        if self.pool.insert(env, self.now) {
            RequestAck::Accepted
        } else {
            RequestAck::Duplicate
        }
    }

    // ---------------------------------------------------------------- dispatch

    /// Handles a message from another replica. The caller guarantees that
    /// `msg.sender` is the authenticated origin.
    pub fn handle_message(&mut self, now: Duration, msg: ProtocolMessage) -> Vec<Action> {
        self.now = now;
        if !self.cfg.is_member(msg.sender) || msg.sender == self.id {
            return Vec::new();
        }
        self.dispatch(msg);
        self.take_out()
    }

    fn dispatch(&mut self, msg: ProtocolMessage) {
        trace!(
            "r{} <- {:?} i={} reg={} from {}",
            self.id,
            msg.kind(),
            msg.instance,
            msg.regency,
            msg.sender
        );
        match msg.body {
            Body::Request(env) => {
                if env.validate().is_ok() && self.add_request(env) == RequestAck::Accepted {
                    self.try_propose();
                    self.arm_suspicion();
                }
            }
            Body::Stop => self.on_stop(msg.sender, msg.regency),
            Body::Fetch(d) => self.on_fetch(msg.sender, msg.instance, d),
            Body::BatchReply(ref b) => {
                let b = b.clone();
                self.on_batch_reply(msg.instance, b)
            }
            _ if msg.regency > self.regency => self.defer(msg),
            _ if msg.regency < self.regency => {}
            Body::StopData(sd) => self.on_stopdata(msg.sender, sd),
            Body::Sync(plan) => self.on_sync(msg.sender, plan),
            // Normal-case traffic waits until the regency's plan is adopted.
            _ if self.sync.is_some() => self.defer(msg),
            Body::Propose(b) => self.on_propose(msg.sender, msg.instance, b),
            Body::Write(d) => self.on_write(msg.sender, msg.instance, d),
            Body::Accept(d) => self.on_accept(msg.sender, msg.instance, d),
            Body::Block(_) | Body::Register | Body::Hello => {}
        }
    }

    fn defer(&mut self, msg: ProtocolMessage) {
        if self.deferred.len() < MAX_DEFERRED {
            self.deferred.push(msg);
        }
    }

    fn replay_deferred(&mut self) {
        let msgs = std::mem::take(&mut self.deferred);
        for m in msgs {
            self.dispatch(m);
        }
    }

    /// Instance state for `inst` if it is current or within the look-ahead window.
    fn instance_mut(&mut self, inst: u64) -> Option<&mut ConsensusInstance> {
        if inst == self.current.id {
            return Some(&mut self.current);
        }
        let horizon = self
            .plan
            .keys()
            .next_back()
            .copied()
            .unwrap_or(0)
            .max(self.current.id + MAX_AHEAD);
        if inst > self.current.id && inst <= horizon {
            let regency = self.regency;
            return Some(
                self.ahead
                    .entry(inst)
                    .or_insert_with(|| ConsensusInstance::new(inst, regency)),
            );
        }
        None
    }

    // ---------------------------------------------------------------- proposing

    fn try_propose(&mut self) {
        if !self.is_leader() || self.sync.is_some() || self.pool.is_empty() {
            return;
        }
        if self.current.phase != Phase::Idle || self.current.proposed.is_some() {
            return;
        }
        if self.plan.keys().any(|i| *i >= self.current.id) {
            return;
        }
        let full = self.pool.len() >= self.cfg.batch_limit;
        let deadline = self.pool.oldest_arrival().unwrap_or(self.now) + self.cfg.batch_timeout;
        if !full && self.now < deadline {
            if !self.batch_armed {
                self.batch_armed = true;
                self.batch_gen += 1;
                self.out.push(Action::SetTimer {
                    timer: ReplicaTimer {
                        kind: TimerKind::Batch,
                        generation: self.batch_gen,
                    },
                    after: deadline - self.now,
                });
            }
            return;
        }
        let envelopes = self.pool.form_batch(self.cfg.batch_limit);
        let batch = Arc::new(Batch::new(envelopes));
        let inst = self.current.id;
        debug!(
            "r{} proposes instance {} ({} envelopes) at regency {}",
            self.id,
            inst,
            batch.len(),
            self.regency
        );
        self.stats.proposals += 1;
        self.out
            .push(Action::Broadcast(self.msg(inst, Body::Propose(batch.clone()))));
        self.accept_proposal(batch);
    }

    /// Checks a proposed batch: non-empty, within the batch limit, well-formed
    /// envelopes without repeated `(client, seq)`.
    pub fn batch_is_valid(&self, batch: &Batch) -> bool {
        if batch.is_empty() || batch.len() > self.cfg.batch_limit {
            return false;
        }
        let mut seen = BTreeSet::new();
        batch
            .envelopes
            .iter()
            .all(|e| e.validate().is_ok() && seen.insert(e.key()))
    }

    fn on_propose(&mut self, from: NodeId, inst: u64, batch: Arc<Batch>) {
        if from != self.leader() {
            return;
        }
        if !self.batch_is_valid(&batch) {
            self.stats.invalid_proposals += 1;
            self.suspect_leader();
            return;
        }
        let regency = self.regency;
        let Some(ins) = self.instance_mut(inst) else {
            return;
        };
        if ins.regency != regency {
            ins.enter_regency(regency);
        }
        match &ins.proposed {
            Some(p) if p.digest == batch.digest => return,
            Some(_) => {
                self.stats.equivocations_seen += 1;
                self.suspect_leader();
                return;
            }
            None => {}
        }
        if ins.phase == Phase::Decided {
            return;
        }
        ins.proposed = Some(batch.clone());
        ins.remember(&batch);
        if inst == self.current.id {
            self.accept_proposal(batch);
        }
    }

    /// Records `batch` as the proposal of the current instance and sends WRITE.
    fn accept_proposal(&mut self, batch: Arc<Batch>) {
        let inst = self.current.id;
        if self.current.regency != self.regency {
            self.current.enter_regency(self.regency);
        }
        self.current.proposed = Some(batch.clone());
        self.current.remember(&batch);
        if self.current.phase == Phase::Idle {
            self.current.phase = Phase::Proposed;
            self.current.proposed_at = Some(self.now);
            self.out
                .push(Action::Broadcast(self.msg(inst, Body::Write(batch.digest))));
            self.current.add_write(self.id, batch.digest);
        }
        self.progress_current();
    }

    // ---------------------------------------------------------------- votes

    fn on_write(&mut self, from: NodeId, inst: u64, d: Digest) {
        let regency = self.regency;
        if let Some(ins) = self.instance_mut(inst) {
            if ins.regency != regency {
                ins.enter_regency(regency);
            }
            ins.add_write(from, d);
        }
        if inst == self.current.id {
            self.progress_current();
        }
    }

    fn on_accept(&mut self, from: NodeId, inst: u64, d: Digest) {
        let regency = self.regency;
        if let Some(ins) = self.instance_mut(inst) {
            if ins.regency != regency {
                ins.enter_regency(regency);
            }
            ins.add_accept(from, d);
        }
        if inst == self.current.id {
            self.progress_current();
        }
    }

    /// Advances the current instance as far as its votes allow, then moves
    /// on to the next instance while decisions keep coming.
    fn progress_current(&mut self) {
        loop {
            if self.current.phase == Phase::Decided {
                return;
            }
            if self.current.phase < Phase::Written {
                if let Some(d) = self.current.write_quorum(&self.cfg) {
                    match self.current.known.get(&d).cloned() {
                        Some(batch) => self.on_write_quorum(batch),
                        None => self.fetch(d, true),
                    }
                }
            }
            let Some(d) = self.current.accept_quorum(&self.cfg) else {
                return;
            };
            let Some(batch) = self.current.known.get(&d).cloned() else {
                self.fetch(d, false);
                return;
            };
            self.decide(batch);
            if !self.advance() {
                return;
            }
        }
    }

    fn on_write_quorum(&mut self, batch: Arc<Batch>) {
        let inst = self.current.id;
        self.current.phase = Phase::Written;
        self.current.lock = Some((self.regency, batch.clone()));
        if self.cfg.tentative() && !self.current.tentatively_delivered {
            self.current.tentatively_delivered = true;
            let envelopes = Arc::new(self.filter_decided(&batch));
            self.out.push(Action::Deliver(Delivery::Tentative {
                instance: inst,
                envelopes,
            }));
        }
        self.out
            .push(Action::Broadcast(self.msg(inst, Body::Accept(batch.digest))));
        self.current.add_accept(self.id, batch.digest);
    }

    fn filter_decided(&self, batch: &Batch) -> Vec<Envelope> {
        let mut seen = BTreeSet::new();
        batch
            .envelopes
            .iter()
            .filter(|e| !self.decided.contains(e.key()) && seen.insert(e.key()))
            .cloned()
            .collect()
    }

    fn decide(&mut self, batch: Arc<Batch>) {
        let inst = self.current.id;
        let tentative_same = self.current.tentatively_delivered
            && self
                .current
                .lock
                .as_ref()
                .is_some_and(|(_, b)| b.digest == batch.digest);
        if tentative_same {
            self.out.push(Action::Deliver(Delivery::Confirm { instance: inst }));
        } else {
            if self.current.tentatively_delivered {
                self.stats.rollbacks += 1;
                self.out.push(Action::Deliver(Delivery::Rollback {
                    last_final: self.last_decided,
                }));
            }
            let envelopes = Arc::new(self.filter_decided(&batch));
            self.out.push(Action::Deliver(Delivery::Final {
                instance: inst,
                envelopes,
            }));
        }
        for e in &batch.envelopes {
            self.decided.insert(e.key());
            self.pool.remove(e.key());
        }
        self.current.phase = Phase::Decided;
        self.last_decided = inst;
        self.stats.decided_instances += 1;
        self.decided_tail.push_back((inst, batch.clone()));
        while self.decided_tail.len() > STOPDATA_TAIL {
            self.decided_tail.pop_front();
        }
        self.decided_digests.insert(inst, batch.digest);
        while self.decided_digests.len() > DECIDED_DIGESTS_KEPT {
            self.decided_digests.pop_first();
        }
        self.plan.remove(&inst);
        self.last_progress = self.now;
        debug!("r{} decided instance {} ({} envelopes)", self.id, inst, batch.len());
    }

    /// Moves to the next instance; returns true if it may be decidable already.
    fn advance(&mut self) -> bool {
        let next = self.last_decided + 1;
        let regency = self.regency;
        let mut ins = self
            .ahead
            .remove(&next)
            .unwrap_or_else(|| ConsensusInstance::new(next, regency));
        if ins.regency != regency {
            ins.enter_regency(regency);
        }
        self.ahead.retain(|i, _| *i > next);
        let stored = ins.proposed.take();
        self.current = ins;
        self.suspicion_armed = false;
        self.arm_suspicion();

        let proposal = self.plan.get(&next).cloned().or(stored);
        match proposal {
            Some(batch) => {
                self.accept_proposal(batch);
                false
            }
            None => {
                self.try_propose();
                self.current.accept_quorum(&self.cfg).is_some()
            }
        }
    }

    // ---------------------------------------------------------------- fetching

    fn fetch(&mut self, d: Digest, from_writers: bool) {
        if self.current.fetch_sent {
            return;
        }
        self.current.fetch_sent = true;
        self.stats.fetches += 1;
        let inst = self.current.id;
        let votes = if from_writers {
            &self.current.write_votes
        } else {
            &self.current.accept_votes
        };
        let targets: Vec<NodeId> = votes
            .iter()
            .filter(|(n, vd)| **vd == d && **n != self.id)
            .map(|(n, _)| *n)
            .collect();
        for t in targets {
            self.out.push(Action::Send(t, self.msg(inst, Body::Fetch(d))));
        }
    }

    fn on_fetch(&mut self, from: NodeId, inst: u64, d: Digest) {
        let found = if inst == self.current.id {
            self.current.known.get(&d).cloned()
        } else if let Some(ins) = self.ahead.get(&inst) {
            ins.known.get(&d).cloned()
        } else {
            self.decided_tail
                .iter()
                .find(|(i, b)| *i == inst && b.digest == d)
                .map(|(_, b)| b.clone())
        };
        if let Some(b) = found {
            self.out.push(Action::Send(from, self.msg(inst, Body::BatchReply(b))));
        }
    }

    fn on_batch_reply(&mut self, inst: u64, batch: Arc<Batch>) {
        if !self.batch_is_valid(&batch) {
            return;
        }
        if let Some(ins) = self.instance_mut(inst) {
            let wanted = ins
                .write_votes
                .values()
                .chain(ins.accept_votes.values())
                .any(|d| *d == batch.digest);
            if wanted {
                ins.remember(&batch);
                ins.fetch_sent = false;
            }
        }
        if inst == self.current.id {
            self.progress_current();
        }
    }

    // ---------------------------------------------------------------- timers

    pub fn on_timer(&mut self, now: Duration, timer: ReplicaTimer) -> Vec<Action> {
        self.now = now;
        match timer.kind {
            TimerKind::Batch if timer.generation == self.batch_gen => {
                self.batch_armed = false;
                self.try_propose();
            }
            TimerKind::Suspicion if timer.generation == self.suspicion_gen => {
                self.suspicion_armed = false;
                self.check_suspicion();
            }
            _ => {}
        }
        self.take_out()
    }

    /// Time at which the oldest outstanding work item started waiting.
    fn waiting_since(&self) -> Option<Duration> {
        let mut since = self.pool.oldest_arrival();
        if let Some(s) = &self.sync {
            since = Some(since.map_or(s.started, |t| t.min(s.started)));
        }
        if self.current.phase != Phase::Decided {
            if let Some(p) = self.current.proposed_at {
                since = Some(since.map_or(p, |t| t.min(p)));
            }
        }
        since.map(|t| t.max(self.last_progress))
    }

    /// When the leader is next suspected. While a STOP for a later regency
    /// is outstanding, escalation waits for that regency's own timeout.
    fn suspicion_deadline(&self) -> Option<Duration> {
        let since = self.waiting_since()?;
        if self.stop_sent_for > self.regency {
            Some(since.max(self.stop_sent_at) + self.cfg.suspicion_timeout_at(self.stop_sent_for))
        } else {
            Some(since + self.cfg.suspicion_timeout_at(self.regency))
        }
    }

    fn arm_suspicion(&mut self) {
        if self.suspicion_armed {
            return;
        }
        let Some(deadline) = self.suspicion_deadline() else {
            return;
        };
        self.suspicion_armed = true;
        self.suspicion_gen += 1;
        self.out.push(Action::SetTimer {
            timer: ReplicaTimer {
                kind: TimerKind::Suspicion,
                generation: self.suspicion_gen,
            },
            after: deadline.saturating_sub(self.now).max(Duration::from_millis(1)),
        });
    }

    fn check_suspicion(&mut self) {
        let Some(deadline) = self.suspicion_deadline() else {
            return;
        };
        if self.now >= deadline {
            debug!(
                "r{} suspects leader {} of regency {}",
                self.id,
                self.leader(),
                self.regency
            );
            self.suspect_leader();
        }
        self.arm_suspicion();
    }

    // ---------------------------------------------------------------- leader change

    fn suspect_leader(&mut self) {
        let target = self.regency.max(self.stop_sent_for) + 1;
        self.send_stop(target);
    }

    fn send_stop(&mut self, target: u64) {
        if target <= self.stop_sent_for || target <= self.regency {
            return;
        }
        self.stop_sent_for = target;
        self.stop_sent_at = self.now;
        let msg = ProtocolMessage::new(0, target, self.id, Body::Stop);
        self.out.push(Action::Broadcast(msg));
        self.record_stop(self.id, target);
    }

    fn on_stop(&mut self, from: NodeId, target: u64) {
        if target <= self.regency {
            return;
        }
        self.record_stop(from, target);
    }

    fn record_stop(&mut self, from: NodeId, target: u64) {
        let votes = self.stops.entry(target).or_default();
        votes.insert(from);
        let count = votes.len();
        if count > self.cfg.f && self.stop_sent_for < target {
            self.send_stop(target);
            return;
        }
        if count >= self.cfg.stop_quorum() && target > self.regency {
            self.install(target);
        }
    }

    fn install(&mut self, regency: u64) {
        debug!(
            "r{} installs regency {} (leader {})",
            self.id,
            regency,
            self.cfg.leader_of(regency)
        );
        self.regency = regency;
        self.stats.regency_changes += 1;
        self.stops.retain(|r, _| *r > regency);
        self.stop_sent_for = self.stop_sent_for.max(regency);

        if self.current.tentatively_delivered && self.current.phase != Phase::Decided {
            self.current.tentatively_delivered = false;
            self.stats.rollbacks += 1;
            self.out.push(Action::Deliver(Delivery::Rollback {
                last_final: self.last_decided,
            }));
        }
        self.current.enter_regency(regency);
        for ins in self.ahead.values_mut() {
            ins.enter_regency(regency);
        }
        self.plan.clear();
        self.batch_armed = false;
        self.pool.touch_all(self.now);
        self.last_progress = self.now;

        let report = StopData {
            last_decided: self.last_decided,
            decided_tail: self.decided_tail.iter().cloned().collect(),
            lock: self.current.lock.clone(),
        };
        self.sync = Some(SyncRound {
            started: self.now,
            ..SyncRound::default()
        });
        self.out
            .push(Action::Broadcast(self.msg(0, Body::StopData(report.clone()))));
        self.suspicion_armed = false;
        self.arm_suspicion();
        self.on_stopdata(self.id, report);
        self.replay_deferred();
    }

    fn on_stopdata(&mut self, from: NodeId, report: StopData) {
        let Some(sync) = self.sync.as_mut() else {
            return;
        };
        sync.reports.entry(from).or_insert(report);
        if self.is_leader() {
            self.try_send_plan();
        }
        self.try_adopt_pending();
    }

    fn try_send_plan(&mut self) {
        let Some(sync) = self.sync.as_ref() else {
            return;
        };
        if sync.plan_sent {
            return;
        }
        let Some((reporters, entries)) = choose_reports(&sync.reports, &self.cfg) else {
            return;
        };
        let plan = SyncPlan { reporters, entries };
        if let Some(s) = self.sync.as_mut() {
            s.plan_sent = true;
        }
        debug!(
            "r{} sends SYNC for regency {} with {} entries",
            self.id,
            self.regency,
            plan.entries.len()
        );
        self.out.push(Action::Broadcast(self.msg(0, Body::Sync(plan.clone()))));
        self.adopt_plan(plan);
    }

    fn on_sync(&mut self, from: NodeId, plan: SyncPlan) {
        if from != self.leader() {
            return;
        }
        let Some(sync) = self.sync.as_mut() else {
            return;
        };
        if sync.pending.is_none() {
            sync.pending = Some(plan);
        }
        self.try_adopt_pending();
    }

    fn try_adopt_pending(&mut self) {
        let Some(sync) = self.sync.as_ref() else {
            return;
        };
        let Some(plan) = sync.pending.as_ref() else {
            return;
        };
        if !plan.reporters.iter().all(|r| sync.reports.contains_key(r)) {
            return;
        }
        let subset: BTreeMap<NodeId, StopData> = plan.reporters.iter().map(|r| (*r, sync.reports[r].clone())).collect();
        let plan = plan.clone();
        let valid = match compute_plan(&subset, &self.cfg) {
            Ok(expected) => {
                expected.len() == plan.entries.len()
                    && expected
                        .iter()
                        .zip(&plan.entries)
                        .all(|(a, b)| a.0 == b.0 && a.1.digest == b.1.digest)
            }
            Err(_) => false,
        };
        if !valid {
            debug!("r{} rejects SYNC of regency {}", self.id, self.regency);
            if let Some(s) = self.sync.as_mut() {
                s.pending = None;
            }
            self.suspect_leader();
            return;
        }
        self.adopt_plan(plan);
    }

    fn adopt_plan(&mut self, plan: SyncPlan) {
        self.sync = None;
        self.last_progress = self.now;
        for (inst, batch) in plan.entries {
            if inst <= self.last_decided {
                // Help laggards: vote for what this replica already decided.
                if self.decided_digests.get(&inst) == Some(&batch.digest) {
                    self.out
                        .push(Action::Broadcast(self.msg(inst, Body::Write(batch.digest))));
                    self.out
                        .push(Action::Broadcast(self.msg(inst, Body::Accept(batch.digest))));
                }
                continue;
            }
            self.plan.insert(inst, batch.clone());
            if let Some(ins) = self.instance_mut(inst) {
                ins.remember(&batch);
            }
        }
        self.replay_deferred();
        if let Some(batch) = self.plan.get(&self.current.id).cloned() {
            self.accept_proposal(batch);
        } else {
            self.try_propose();
        }
        self.suspicion_armed = false;
        self.arm_suspicion();
    }
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.id)
            .field("regency", &self.regency)
            .field("last_decided", &self.last_decided)
            .field("pool", &self.pool.len())
            .field("phase", &self.current.phase)
            .finish_non_exhaustive()
    }
}

/// Keys of the envelopes in a batch, for tests and bookkeeping.
pub fn batch_keys(envs: &[Envelope]) -> Vec<(ClientId, u64)> {
    envs.iter().map(|e| e.key()).collect()
}
