// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::time::Duration;

use crate::crypto::{Digest, NodeId};
use crate::error::{ConfigError, QuorumError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Unweighted quorums of ⌈(n+f+1)/2⌉, delivery only after the ACCEPT phase.
    Classic,
    /// Binary vote weights over `3f+1+delta` replicas and tentative delivery
    /// right after the WRITE phase.
    Wheat,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classic" => Ok(Mode::Classic),
            "wheat" => Ok(Mode::Wheat),
            other => Err(ConfigError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Classic => "classic",
            Mode::Wheat => "wheat",
        })
    }
}

pub const DEFAULT_BATCH_LIMIT: usize = 400;
pub const DEFAULT_BATCH_TIMEOUT: Duration = Duration::from_millis(5);
pub const DEFAULT_SUSPICION_TIMEOUT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub n: usize,
    pub f: usize,
    pub delta: usize,
    pub mode: Mode,
    /// Vote weight per node, all 1 in classic mode.
    pub weights: BTreeMap<NodeId, u32>,
    pub batch_limit: usize,
    pub batch_timeout: Duration,
    /// Leader-suspicion timeout at regency 0; doubles with each regency.
    pub suspicion_timeout: Duration,
}

impl ClusterConfig {
    pub fn classic(n: usize, f: usize) -> Result<Self, ConfigError> {
        if n < 3 * f + 1 {
            return Err(ConfigError::Invalid(format!("n={n} < 3f+1 for f={f}")));
        }
        let cfg = Self {
            n,
            f,
            delta: n - (3 * f + 1),
            mode: Mode::Classic,
            weights: (0..n as NodeId).map(|i| (i, 1)).collect(),
            batch_limit: DEFAULT_BATCH_LIMIT,
            batch_timeout: DEFAULT_BATCH_TIMEOUT,
            suspicion_timeout: DEFAULT_SUSPICION_TIMEOUT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// WHEAT over `3f+1+delta` replicas with `V_max` given to the listed
    /// nodes (exactly `2f` of them).
    pub fn wheat(f: usize, delta: usize, vmax_nodes: &[NodeId]) -> Result<Self, ConfigError> {
        if f == 0 || !delta.is_multiple_of(f) {
            return Err(ConfigError::Invalid(format!(
                "delta={delta} must be a multiple of f={f}"
            )));
        }
        let n = 3 * f + 1 + delta;
        let vmax = 1 + (delta / f) as u32;
        let weights = (0..n as NodeId)
            .map(|i| (i, if vmax_nodes.contains(&i) { vmax } else { 1 }))
            .collect();
        let cfg = Self {
            n,
            f,
            delta,
            mode: Mode::Wheat,
            weights,
            batch_limit: DEFAULT_BATCH_LIMIT,
            batch_timeout: DEFAULT_BATCH_TIMEOUT,
            suspicion_timeout: DEFAULT_SUSPICION_TIMEOUT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// WHEAT with the first `2f` nodes holding `V_max`.
    pub fn wheat_default(f: usize, delta: usize) -> Result<Self, ConfigError> {
        let vmax: Vec<NodeId> = (0..2 * f as NodeId).collect();
        Self::wheat(f, delta, &vmax)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.f < 1 {
            return bad("f must be at least 1".into());
        }
        if self.n != 3 * self.f + 1 + self.delta {
            return bad(format!(
                "n={} differs from 3f+1+delta={}",
                self.n,
                3 * self.f + 1 + self.delta
            ));
        }
        if self.n > NodeId::MAX as usize {
            return bad("too many nodes".into());
        }
        if self.weights.len() != self.n || (0..self.n as NodeId).any(|i| !self.weights.contains_key(&i)) {
            return bad("weights must cover exactly nodes 0..n".into());
        }
        if self.batch_limit == 0 {
            return bad("batch_limit must be positive".into());
        }
        match self.mode {
            Mode::Classic => {
                if self.weights.values().any(|w| *w != 1) {
                    return bad("classic mode requires unit weights".into());
                }
            }
            Mode::Wheat => {
                if !self.delta.is_multiple_of(self.f) {
                    return bad(format!("delta={} not divisible by f={}", self.delta, self.f));
                }
                let vmax = self.v_max();
                let holders = self.weights.values().filter(|w| **w == vmax).count();
                let others_min = self.weights.values().all(|w| *w == vmax || *w == 1);
                let expected_holders = if vmax == 1 { self.n } else { 2 * self.f };
                if !others_min || holders != expected_holders {
                    return bad(format!(
                        "wheat needs exactly 2f={} nodes at V_max={vmax} and the rest at 1",
                        2 * self.f
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn v_max(&self) -> u32 {
        1 + (self.delta / self.f) as u32
    }

    /// Vote units needed for a WRITE/ACCEPT quorum.
    pub fn threshold(&self) -> u64 {
        match self.mode {
            Mode::Classic => classic_threshold(self.n, self.f) as u64,
            Mode::Wheat => 2 * self.f as u64 * self.v_max() as u64 + 1,
        }
    }

    /// Replicas whose STOP messages install a new regency.
    pub fn stop_quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn weight(&self, node: NodeId) -> Option<u32> {
        self.weights.get(&node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        0..self.n as NodeId
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        (node as usize) < self.n
    }

    pub fn leader_of(&self, regency: u64) -> NodeId {
        (regency % self.n as u64) as NodeId
    }

    pub fn tentative(&self) -> bool {
        self.mode == Mode::Wheat
    }

    /// Total weight of `voters`, failing on a node outside the cluster.
    pub fn weight_of<'a>(&self, voters: impl IntoIterator<Item = &'a NodeId>) -> Result<u64, QuorumError> {
        voters.into_iter().try_fold(0u64, |acc, v| {
            self.weight(*v)
                .map(|w| acc + w as u64)
                .ok_or(QuorumError::UnknownVoter(*v))
        })
    }

    pub fn suspicion_timeout_at(&self, regency: u64) -> Duration {
        self.suspicion_timeout * (1u32 << regency.min(6))
    }
}

/// ⌈(n+f+1)/2⌉
pub fn classic_threshold(n: usize, f: usize) -> usize {
    (n + f + 1).div_ceil(2)
}

/// True iff the nodes voting for `digest` carry at least the configured threshold.
pub fn quorum_reached(
    votes: &BTreeMap<NodeId, Digest>,
    digest: &Digest,
    cfg: &ClusterConfig,
) -> Result<bool, QuorumError> {
    let mut weight = 0u64;
    for (node, d) in votes {
        let w = cfg.weight(*node).ok_or(QuorumError::UnknownVoter(*node))?;
        if d == digest {
            weight += w as u64;
        }
    }
    Ok(weight >= cfg.threshold())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(nodes: &[NodeId], d: Digest) -> BTreeMap<NodeId, Digest> {
        nodes.iter().map(|n| (*n, d)).collect()
    }

    #[test]
    fn classic_thresholds() {
        assert_eq!(ClusterConfig::classic(4, 1).unwrap().threshold(), 3);
        assert_eq!(ClusterConfig::classic(7, 2).unwrap().threshold(), 5);
        assert_eq!(ClusterConfig::classic(10, 3).unwrap().threshold(), 7);
        assert_eq!(ClusterConfig::classic(5, 1).unwrap().threshold(), 4);
    }

    #[test]
    fn classic_n7_quorum() {
        let cfg = ClusterConfig::classic(7, 2).unwrap();
        let d = Digest([1; 32]);
        assert!(quorum_reached(&votes(&[0, 1, 2, 3, 4], d), &d, &cfg).unwrap());
        assert!(!quorum_reached(&votes(&[0, 1, 2, 3], d), &d, &cfg).unwrap());
    }

    #[test]
    fn wheat_five_replicas() {
        let cfg = ClusterConfig::wheat_default(1, 1).unwrap();
        assert_eq!(cfg.n, 5);
        assert_eq!(cfg.v_max(), 2);
        assert_eq!(cfg.threshold(), 5);
        let w: Vec<u32> = cfg.weights.values().copied().collect();
        assert_eq!(w, vec![2, 2, 1, 1, 1]);
        let d = Digest([2; 32]);
        assert!(quorum_reached(&votes(&[0, 1, 2], d), &d, &cfg).unwrap());
        assert!(!quorum_reached(&votes(&[0, 2, 3], d), &d, &cfg).unwrap());
        assert!(!quorum_reached(&votes(&[3, 4], d), &d, &cfg).unwrap());
    }

    #[test]
    fn wheat_without_spares_matches_classic() {
        for f in 1..5 {
            let w = ClusterConfig::wheat_default(f, 0).unwrap();
            assert_eq!(w.threshold() as usize, classic_threshold(w.n, f));
        }
    }

    #[test]
    fn votes_for_other_digests_do_not_count() {
        let cfg = ClusterConfig::classic(4, 1).unwrap();
        let (a, b) = (Digest([1; 32]), Digest([2; 32]));
        let mut v = votes(&[0, 1], a);
        v.insert(2, b);
        assert!(!quorum_reached(&v, &a, &cfg).unwrap());
    }

    #[test]
    fn unknown_voter_is_an_error() {
        let cfg = ClusterConfig::classic(4, 1).unwrap();
        let d = Digest::ZERO;
        assert!(quorum_reached(&votes(&[0, 9], d), &d, &cfg).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ClusterConfig::classic(3, 1).is_err());
        assert!(ClusterConfig::wheat(2, 1, &[0, 1, 2, 3]).is_err());
        assert!(ClusterConfig::wheat(1, 1, &[0]).is_err());
        let mut cfg = ClusterConfig::classic(4, 1).unwrap();
        cfg.weights.insert(0, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn leader_rotates() {
        let cfg = ClusterConfig::classic(4, 1).unwrap();
        assert_eq!(cfg.leader_of(0), 0);
        assert_eq!(cfg.leader_of(5), 1);
    }
}
