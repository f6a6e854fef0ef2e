// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::config::ClusterConfig;
use super::message::Batch;
use crate::crypto::{Digest, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    /// Batch recorded and WRITE sent.
    Proposed,
    /// WRITE quorum seen and ACCEPT sent.
    Written,
    Decided,
}

/// Per-sequence-number consensus state. Votes belong to the regency in
/// `regency` and are discarded when a new regency is installed.
#[derive(Debug, Clone)]
pub struct ConsensusInstance {
    pub id: u64,
    pub regency: u64,
    pub proposed: Option<Arc<Batch>>,
    pub write_votes: BTreeMap<NodeId, Digest>,
    pub accept_votes: BTreeMap<NodeId, Digest>,
    pub phase: Phase,
    pub tentatively_delivered: bool,
    /// Batch for which this replica saw a WRITE quorum, with the regency it happened in.
    pub lock: Option<(u64, Arc<Batch>)>,
    /// Every batch seen for this instance, by digest.
    pub known: BTreeMap<Digest, Arc<Batch>>,
    pub proposed_at: Option<Duration>,
    pub fetch_sent: bool,
}

impl ConsensusInstance {
    pub fn new(id: u64, regency: u64) -> Self {
        Self {
            id,
            regency,
            proposed: None,
            write_votes: BTreeMap::new(),
            accept_votes: BTreeMap::new(),
            phase: Phase::Idle,
            tentatively_delivered: false,
            lock: None,
            known: BTreeMap::new(),
            proposed_at: None,
            fetch_sent: false,
        }
    }

    /// Forgets everything tied to the previous regency; keeps the lock and known batches.
    pub fn enter_regency(&mut self, regency: u64) {
        self.regency = regency;
        self.proposed = None;
        self.write_votes.clear();
        self.accept_votes.clear();
        self.proposed_at = None;
        self.fetch_sent = false;
        if self.phase != Phase::Decided {
            self.phase = Phase::Idle;
        }
    }

    /// Records a vote; the first vote of a sender wins.
    pub fn add_write(&mut self, from: NodeId, d: Digest) -> bool {
        insert_once(&mut self.write_votes, from, d)
    }

    pub fn add_accept(&mut self, from: NodeId, d: Digest) -> bool {
        insert_once(&mut self.accept_votes, from, d)
    }

    pub fn write_quorum(&self, cfg: &ClusterConfig) -> Option<Digest> {
        quorum_digest(&self.write_votes, cfg)
    }

    pub fn accept_quorum(&self, cfg: &ClusterConfig) -> Option<Digest> {
        quorum_digest(&self.accept_votes, cfg)
    }

    pub fn remember(&mut self, batch: &Arc<Batch>) {
        self.known.entry(batch.digest).or_insert_with(|| batch.clone());
    }
}

fn insert_once(votes: &mut BTreeMap<NodeId, Digest>, from: NodeId, d: Digest) -> bool {
    if votes.contains_key(&from) {
        return false;
    }
    votes.insert(from, d);
    true
}

/// The digest whose voters' weight meets the threshold, if any.
fn quorum_digest(votes: &BTreeMap<NodeId, Digest>, cfg: &ClusterConfig) -> Option<Digest> {
    let mut tally: BTreeMap<Digest, u64> = BTreeMap::new();
    for (node, d) in votes {
        *tally.entry(*d).or_default() += cfg.weight(*node).unwrap_or(0) as u64;
    }
    tally.into_iter().find(|(_, w)| *w >= cfg.threshold()).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_vote_per_sender() {
        let mut i = ConsensusInstance::new(1, 0);
        assert!(i.add_write(0, Digest([1; 32])));
        assert!(!i.add_write(0, Digest([2; 32])));
        assert_eq!(i.write_votes[&0], Digest([1; 32]));
    }

    #[test]
    fn quorum_needs_matching_digests() {
        let cfg = ClusterConfig::classic(4, 1).unwrap();
        let mut i = ConsensusInstance::new(1, 0);
        let (a, b) = (Digest([1; 32]), Digest([2; 32]));
        i.add_write(0, a);
        i.add_write(1, a);
        i.add_write(2, b);
        assert_eq!(i.write_quorum(&cfg), None);
        i.add_write(3, a);
        assert_eq!(i.write_quorum(&cfg), Some(a));
    }

    #[test]
    fn regency_change_keeps_lock() {
        let mut i = ConsensusInstance::new(1, 0);
        let b = Arc::new(Batch::new(vec![]));
        i.lock = Some((0, b.clone()));
        i.add_accept(1, b.digest);
        i.phase = Phase::Written;
        i.enter_regency(1);
        assert!(i.accept_votes.is_empty());
        assert_eq!(i.phase, Phase::Idle);
        assert!(i.lock.is_some());
    }
}
