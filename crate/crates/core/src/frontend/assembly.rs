// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Collection of block copies pushed by ordering nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::crypto::{NodeId, PublicKeyDirectory};
use crate::types::{encode_envelopes, Block, BlockHeader};

pub const DEFAULT_GC_GRACE: Duration = Duration::from_secs(30);
pub const DEFAULT_STALL_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendMode {
    /// 2f+1 byte-identical copies, no signature checks.
    Match2f1,
    /// f+1 byte-identical copies whose signatures verify.
    VerifyF1,
}

impl std::str::FromStr for FrontendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "match" | "match_2f1" | "match-2f1" => Ok(Self::Match2f1),
            "verify" | "verify_f1" | "verify-f1" => Ok(Self::VerifyF1),
            other => Err(format!("unknown frontend mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub mode: FrontendMode,
    pub n: usize,
    pub f: usize,
    /// Node keys; required in `VerifyF1` mode.
    pub keys: Option<Arc<PublicKeyDirectory>>,
    pub stall_timeout: Duration,
    pub gc_grace: Duration,
}

impl FrontendConfig {
    pub fn new(mode: FrontendMode, n: usize, f: usize) -> Self {
        Self {
            mode,
            n,
            f,
            keys: None,
            stall_timeout: DEFAULT_STALL_TIMEOUT,
            gc_grace: DEFAULT_GC_GRACE,
        }
    }

    pub fn threshold(&self) -> usize {
        match self.mode {
            FrontendMode::Match2f1 => 2 * self.f + 1,
            FrontendMode::VerifyF1 => self.f + 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CopyError {
    #[error("copy from unknown node {0}")]
    UnknownNode(NodeId),
    #[error("undecodable block from node {0}")]
    Malformed(NodeId),
    #[error("block from node {0} lacks the sender's signature")]
    Unsigned(NodeId),
    #[error("verify mode without a key directory")]
    NoKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyOutcome {
    Counted,
    Duplicate,
    /// Already delivered or otherwise no longer needed.
    Late,
    /// Sender was ignored: quarantined before or by this copy.
    Quarantined,
    /// Signature or data hash did not verify (verify mode).
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StallAlarm {
    pub channel: String,
    pub missing: u64,
    pub since: Duration,
}

#[derive(Debug, Clone)]
struct Copy {
    body: Vec<u8>,
    block: Block,
    signature: Vec<u8>,
    valid: bool,
}

#[derive(Debug, Default)]
struct Assembly {
    copies: BTreeMap<NodeId, Copy>,
    completed_at: Option<Duration>,
}

#[derive(Debug, Default)]
struct ChannelDelivery {
    next: u64,
    complete: BTreeMap<u64, Block>,
    gap_since: Option<Duration>,
    alarmed_for: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssemblerStats {
    pub copies: u64,
    pub completed: u64,
    pub delivered: u64,
    pub invalid: u64,
    pub conflicts: u64,
    pub alarms: u64,
}

#[derive(Debug)]
pub struct Assembler {
    cfg: FrontendConfig,
    assemblies: BTreeMap<(String, u64), Assembly>,
    channels: BTreeMap<String, ChannelDelivery>,
    quarantined: BTreeSet<NodeId>,
    stats: AssemblerStats,
}

/// Bytes compared for matching: header encoding followed by the envelope list encoding.
pub fn matching_bytes(header: &BlockHeader, envelopes_encoding: &[u8]) -> Vec<u8> {
    let mut body = header.to_bytes().to_vec();
    body.extend_from_slice(envelopes_encoding);
    body
}

impl Assembler {
    pub fn new(cfg: FrontendConfig) -> Result<Self, CopyError> {
        if cfg.mode == FrontendMode::VerifyF1 && cfg.keys.is_none() {
            return Err(CopyError::NoKeys);
        }
        Ok(Self {
            cfg,
            assemblies: BTreeMap::new(),
            channels: BTreeMap::new(),
            quarantined: BTreeSet::new(),
            stats: AssemblerStats::default(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &AssemblerStats {
        &self.stats
    }

    pub fn quarantined(&self) -> &BTreeSet<NodeId> {
        &self.quarantined
    }

    pub fn pending_assemblies(&self) -> usize {
        self.assemblies.len()
    }

    pub fn next_expected(&self, channel: &str) -> u64 {
        self.channels.get(channel).map_or(0, |c| c.next)
    }

    /// Records one pushed copy (channel-prefixed block encoding) and
    /// returns the blocks that became deliverable, in order.
    pub fn on_block_copy(
        &mut self,
        now: Duration,
        node: NodeId,
        wire: &[u8],
        delivered: &mut Vec<(String, Block)>,
    ) -> Result<CopyOutcome, CopyError> {
        if node as usize >= self.cfg.n {
            return Err(CopyError::UnknownNode(node));
        }
        if self.quarantined.contains(&node) {
            return Ok(CopyOutcome::Quarantined);
        }
        let (channel, block) = Block::from_wire(wire).map_err(|_| CopyError::Malformed(node))?;
        let signature = match block.signatures.get(&node) {
            Some(s) if block.signatures.len() == 1 => s.clone(),
            _ => return Err(CopyError::Unsigned(node)),
        };
        self.stats.copies += 1;
        let number = block.header.number;
        let next = self.channels.get(&channel).map_or(0, |c| c.next);
        let key = (channel.clone(), number);
        if number < next || self.assemblies.get(&key).is_some_and(|a| a.completed_at.is_some()) {
            return Ok(CopyOutcome::Late);
        }
        let body = matching_bytes(&block.header, &encode_envelopes(&block.envelopes));
        if let Some(existing) = self.assemblies.get(&key).and_then(|a| a.copies.get(&node)) {
            if existing.body == body {
                return Ok(CopyOutcome::Duplicate);
            }
            self.quarantine(node);
            return Ok(CopyOutcome::Quarantined);
        }
        let valid = match self.cfg.mode {
            FrontendMode::Match2f1 => true,
            FrontendMode::VerifyF1 => {
                let keys = self.cfg.keys.as_ref().ok_or(CopyError::NoKeys)?;
                block.data_matches() && keys.verify(node, &block.header.to_bytes(), &signature).unwrap_or(false)
            }
        };
        if !valid {
            self.stats.invalid += 1;
        }
        self.assemblies.entry(key.clone()).or_default().copies.insert(
            node,
            Copy {
                body,
                block,
                signature,
                valid,
            },
        );
        self.note_gap(now, &channel, number);
        if let Some(block) = self.try_complete(&key) {
            let a = self.assemblies.get_mut(&key).expect("present");
            a.completed_at = Some(now);
            // Later copies of a completed block are answered as late, so
            // the collected bodies are no longer needed.
            a.copies.clear();
            self.stats.completed += 1;
            let ch = self.channels.entry(channel.clone()).or_default();
            ch.complete.insert(number, block);
            self.deliver_ready(now, &channel, delivered);
        }
        Ok(if valid {
            CopyOutcome::Counted
        } else {
            CopyOutcome::Invalid
        })
    }

    fn quarantine(&mut self, node: NodeId) {
        log::warn!("frontend: node {node} sent conflicting copies; quarantined");
        self.stats.conflicts += 1;
        self.quarantined.insert(node);
        for a in self.assemblies.values_mut() {
            if a.completed_at.is_none() {
                a.copies.remove(&node);
            }
        }
    }

    fn try_complete(&self, key: &(String, u64)) -> Option<Block> {
        let a = self.assemblies.get(key)?;
        let mut groups: BTreeMap<&[u8], Vec<(&NodeId, &Copy)>> = BTreeMap::new();
        for (n, c) in a.copies.iter().filter(|(_, c)| c.valid) {
            groups.entry(c.body.as_slice()).or_default().push((n, c));
        }
        let (_, copies) = groups.into_iter().find(|(_, v)| v.len() >= self.cfg.threshold())?;
        let mut block = copies[0].1.block.clone();
        block.signatures = copies.iter().map(|(n, c)| (**n, c.signature.clone())).collect();
        Some(block)
    }

    fn note_gap(&mut self, now: Duration, channel: &str, number: u64) {
        let ch = self.channels.entry(channel.to_string()).or_default();
        if number > ch.next && ch.gap_since.is_none() {
            ch.gap_since = Some(now);
        }
    }

    fn deliver_ready(&mut self, now: Duration, channel: &str, out: &mut Vec<(String, Block)>) {
        let ch = self.channels.get_mut(channel).expect("channel exists");
        while let Some(b) = ch.complete.remove(&ch.next) {
            out.push((channel.to_string(), b));
            ch.next += 1;
            ch.gap_since = None;
            self.stats.delivered += 1;
        }
        let has_later = ch.complete.keys().next().is_some()
            || self
                .assemblies
                .range((channel.to_string(), ch.next + 1)..(channel.to_string(), u64::MAX))
                .next()
                .is_some();
        if has_later && ch.gap_since.is_none() {
            ch.gap_since = Some(now);
        }
    }

    /// Raises an alarm for every channel whose next block has been missing
    /// for longer than the stall timeout while later blocks are known.
    /// Blocks after the gap stay withheld.
    pub fn check_stalls(&mut self, now: Duration) -> Vec<StallAlarm> {
        let mut alarms = Vec::new();
        for (id, ch) in self.channels.iter_mut() {
            let Some(since) = ch.gap_since else { continue };
            if now >= since + self.cfg.stall_timeout && ch.alarmed_for != Some(ch.next) {
                ch.alarmed_for = Some(ch.next);
                alarms.push(StallAlarm {
                    channel: id.clone(),
                    missing: ch.next,
                    since,
                });
            }
        }
        self.stats.alarms += alarms.len() as u64;
        alarms
    }

    /// Drops assemblies delivered more than the grace period ago.
    pub fn gc(&mut self, now: Duration) -> usize {
        let grace = self.cfg.gc_grace;
        let before = self.assemblies.len();
        self.assemblies
            .retain(|_, a| a.completed_at.is_none_or(|t| now < t + grace));
        before - self.assemblies.len()
    }
}
