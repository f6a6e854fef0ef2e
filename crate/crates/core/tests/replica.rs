// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Replica tests over a lockstep in-memory network with manual time.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bftorder::consensus::{Action, Body, ClusterConfig, Delivery, ProtocolMessage, Replica, ReplicaTimer};
use bftorder::crypto::NodeId;
use bftorder::types::Envelope;

struct Net {
    replicas: Vec<Replica>,
    queue: VecDeque<(NodeId, ProtocolMessage)>,
    timers: BTreeMap<(Duration, NodeId, u64), ReplicaTimer>,
    timer_seq: u64,
    now: Duration,
    down: Vec<bool>,
    /// Per replica: finalized envelope keys in order, plus the tentative tail.
    finals: Vec<Vec<(u64, u64)>>,
    tentative: Vec<BTreeMap<u64, Vec<(u64, u64)>>>,
    rollbacks: Vec<u64>,
    /// Every STOP broadcast: (time, sender, target regency).
    stops: Vec<(Duration, NodeId, u64)>,
}

impl Net {
    fn new(cfg: ClusterConfig) -> Self {
        let cfg = Arc::new(cfg);
        let n = cfg.n;
        Self {
            replicas: (0..n as NodeId).map(|i| Replica::new(i, cfg.clone())).collect(),
            queue: VecDeque::new(),
            timers: BTreeMap::new(),
            timer_seq: 0,
            now: Duration::ZERO,
            down: vec![false; n],
            finals: vec![Vec::new(); n],
            tentative: vec![BTreeMap::new(); n],
            rollbacks: vec![0; n],
            stops: Vec::new(),
        }
    }

    fn apply(&mut self, from: NodeId, actions: Vec<Action>) {
        let n = self.replicas.len() as NodeId;
        for a in actions {
            match a {
                Action::Broadcast(m) => {
                    if matches!(m.body, Body::Stop) {
                        self.stops.push((self.now, from, m.regency));
                    }
                    for to in 0..n {
                        if to != from {
                            self.queue.push_back((to, m.clone()));
                        }
                    }
                }
                Action::Send(to, m) => self.queue.push_back((to, m)),
                Action::SetTimer { timer, after } => {
                    self.timer_seq += 1;
                    self.timers.insert((self.now + after, from, self.timer_seq), timer);
                }
                Action::Deliver(d) => self.deliver(from as usize, d),
            }
        }
    }

    fn deliver(&mut self, r: usize, d: Delivery) {
        let keys = |e: &Arc<Vec<Envelope>>| e.iter().map(|e| e.key()).collect::<Vec<_>>();
        match d {
            Delivery::Tentative { instance, envelopes } => {
                self.tentative[r].insert(instance, keys(&envelopes));
            }
            Delivery::Final { envelopes, .. } => self.finals[r].extend(keys(&envelopes)),
            Delivery::Confirm { instance } => {
                let k = self.tentative[r].remove(&instance).expect("confirm without tentative");
                self.finals[r].extend(k);
            }
            Delivery::Rollback { .. } => {
                self.rollbacks[r] += 1;
                self.tentative[r].clear();
            }
        }
    }

    fn submit_all(&mut self, env: Envelope) {
        for i in 0..self.replicas.len() {
            if self.down[i] {
                continue;
            }
            let (_, acts) = self.replicas[i].submit_request(self.now, env.clone());
            self.apply(i as NodeId, acts);
        }
    }

    fn drain(&mut self) {
        while let Some((to, m)) = self.queue.pop_front() {
            if self.down[to as usize] || self.down[m.sender as usize] {
                continue;
            }
            let acts = self.replicas[to as usize].handle_message(self.now, m);
            self.apply(to, acts);
        }
    }

    /// Runs until `t`, firing timers in order and draining messages instantly.
    fn run_until(&mut self, t: Duration) {
        self.drain();
        while let Some((&(at, node, seq), _)) = self.timers.iter().next() {
            if at > t {
                break;
            }
            let timer = self.timers.remove(&(at, node, seq)).unwrap();
            self.now = at;
            if !self.down[node as usize] {
                let acts = self.replicas[node as usize].on_timer(at, timer);
                self.apply(node, acts);
            }
            self.drain();
        }
        self.now = t;
    }
}

fn env(client: u64, seq: u64) -> Envelope {
    Envelope::new("ch", client, seq, seq.to_be_bytes().to_vec())
}

#[test]
fn all_replicas_decide_the_same_sequence() {
    let mut net = Net::new(ClusterConfig::classic(4, 1).unwrap());
    for s in 0..50 {
        net.submit_all(env(1, s));
        net.run_until(net.now + Duration::from_millis(1));
    }
    net.run_until(Duration::from_secs(1));
    assert_eq!(net.finals[0].len(), 50);
    for r in 1..4 {
        assert_eq!(net.finals[r], net.finals[0]);
    }
    assert!(net.replicas.iter().all(|r| r.regency() == 0));
}

#[test]
fn crashed_leader_is_replaced() {
    let mut net = Net::new(ClusterConfig::classic(4, 1).unwrap());
    for s in 0..10 {
        net.submit_all(env(1, s));
    }
    net.run_until(Duration::from_millis(100));
    net.down[0] = true;
    for s in 10..20 {
        net.submit_all(env(1, s));
    }
    net.run_until(Duration::from_secs(5));
    for r in 1..4 {
        assert_eq!(net.finals[r].len(), 20, "replica {r}");
        assert_eq!(net.finals[r], net.finals[1]);
        assert!(net.replicas[r].regency() >= 1);
    }
}

#[test]
fn wheat_confirms_tentative_deliveries() {
    let mut net = Net::new(ClusterConfig::wheat_default(1, 1).unwrap());
    for s in 0..30 {
        net.submit_all(env(2, s));
    }
    net.run_until(Duration::from_secs(1));
    for r in 0..5 {
        assert_eq!(net.finals[r].len(), 30);
        assert!(net.tentative[r].is_empty());
        assert_eq!(net.rollbacks[r], 0);
    }
}

#[test]
fn duplicates_are_ordered_once() {
    let mut net = Net::new(ClusterConfig::classic(4, 1).unwrap());
    for _ in 0..3 {
        for s in 0..5 {
            net.submit_all(env(7, s));
        }
        net.run_until(net.now + Duration::from_millis(20));
    }
    assert_eq!(net.finals[0].len(), 5);
}

#[test]
fn isolated_replica_escalates_one_timeout_at_a_time() {
    let cfg = ClusterConfig::classic(4, 1).unwrap();
    let base = cfg.suspicion_timeout;
    let mut net = Net::new(cfg.clone());
    net.down = vec![true, false, true, true];
    net.submit_all(env(3, 0));
    net.run_until(base * 200);
    let stops: Vec<(Duration, u64)> = net.stops.iter().filter(|s| s.1 == 1).map(|s| (s.0, s.2)).collect();
    assert!(stops.len() >= 2, "{stops:?}");
    for w in stops.windows(2) {
        let ((t0, r0), (t1, r1)) = (w[0], w[1]);
        assert_eq!(r1, r0 + 1);
        // A STOP for r0 is outstanding, so escalation waits out r0's timeout.
        assert!(
            t1 - t0 >= cfg.suspicion_timeout_at(r0),
            "STOP {r1} only {:?} after STOP {r0}",
            t1 - t0
        );
    }
    assert_eq!(net.replicas[1].regency(), 0);
}
