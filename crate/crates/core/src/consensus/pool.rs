// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use crate::types::{ClientId, Envelope};

/// Decided `(client, seq)` pairs per client, bounded to the most recent
/// `window` sequence numbers of each client.
#[derive(Debug, Clone)]
pub struct DecidedFilter {
    window: usize,
    per_client: HashMap<ClientId, BTreeSet<u64>>,
}

pub const DECIDED_WINDOW: usize = 1 << 16;

impl Default for DecidedFilter {
    fn default() -> Self {
        Self::new(DECIDED_WINDOW)
    }
}

impl DecidedFilter {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            per_client: HashMap::new(),
        }
    }

    pub fn contains(&self, key: (ClientId, u64)) -> bool {
        let Some(seqs) = self.per_client.get(&key.0) else {
            return false;
        };
        if seqs.contains(&key.1) {
            return true;
        }
        // Anything older than the retained window counts as decided.
        seqs.len() >= self.window && seqs.first().is_some_and(|lo| key.1 < *lo)
    }

    pub fn insert(&mut self, key: (ClientId, u64)) {
        let seqs = self.per_client.entry(key.0).or_default();
        seqs.insert(key.1);
        while seqs.len() > self.window {
            seqs.pop_first();
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    env: Envelope,
    arrived: Duration,
}

/// Pending requests in arrival order. Requests leave the pool when the
/// batch containing them is decided, not when it is proposed.
#[derive(Debug, Clone, Default)]
pub struct RequestPool {
    next_index: u64,
    by_arrival: BTreeMap<u64, Pending>,
    index_of: HashMap<(ClientId, u64), u64>,
}

impl RequestPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a request; returns false when the same `(client, seq)` is already pending.
    pub fn insert(&mut self, env: Envelope, now: Duration) -> bool {
        let key = env.key();
        if self.index_of.contains_key(&key) {
            return false;
        }
        let idx = self.next_index;
        self.next_index += 1;
        self.index_of.insert(key, idx);
        self.by_arrival.insert(idx, Pending { env, arrived: now });
        true
    }

    pub fn remove(&mut self, key: (ClientId, u64)) -> bool {
        match self.index_of.remove(&key) {
            Some(idx) => {
                self.by_arrival.remove(&idx);
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, key: (ClientId, u64)) -> bool {
        self.index_of.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.by_arrival.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_arrival.is_empty()
    }

    pub fn oldest_arrival(&self) -> Option<Duration> {
        self.by_arrival.values().map(|p| p.arrived).min()
    }

    /// Up to `limit` envelopes in arrival order.
    pub fn form_batch(&self, limit: usize) -> Vec<Envelope> {
        self.by_arrival.values().take(limit).map(|p| p.env.clone()).collect()
    }

    /// Restarts the waiting time of every pending request (after a regency change).
    pub fn touch_all(&mut self, now: Duration) {
        for p in self.by_arrival.values_mut() {
            p.arrived = now;
        }
    }
}
