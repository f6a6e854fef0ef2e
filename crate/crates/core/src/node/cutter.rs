// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use crate::crypto::{Digest, DIGEST_LEN};
use crate::types::{data_hash, BlockHeader, ClientId, Envelope};

/// Client ids at or above this value are reserved for time-to-cut
/// envelopes, which ask every node to cut a partial block.
pub const TTC_CLIENT_BASE: ClientId = u64::MAX - 0xFFFF;

pub fn is_ttc(env: &Envelope) -> bool {
    env.client_id >= TTC_CLIENT_BASE
}

/// A time-to-cut envelope from `node` asking for block `target` of `channel` to be cut.
pub fn ttc_envelope(channel: &str, node: u16, seq: u64, target: u64) -> Envelope {
    Envelope::new(
        channel,
        TTC_CLIENT_BASE + node as u64,
        seq,
        target.to_be_bytes().to_vec(),
    )
}

fn ttc_target(env: &Envelope) -> Option<u64> {
    let bytes: [u8; 8] = env.payload.as_slice().try_into().ok()?;
    Some(u64::from_be_bytes(bytes))
}

/// Per-channel buffer of ordered envelopes waiting to fill a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCutter {
    pub channel_id: String,
    pub buffer: Vec<Envelope>,
    pub block_size: usize,
}

impl BlockCutter {
    pub fn new(channel_id: impl Into<String>, block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            channel_id: channel_id.into(),
            buffer: Vec::new(),
            block_size,
        }
    }

    /// Appends an envelope; returns the block contents when the buffer fills.
    pub fn push(&mut self, env: Envelope) -> Option<Vec<Envelope>> {
        self.buffer.push(env);
        (self.buffer.len() >= self.block_size).then(|| std::mem::take(&mut self.buffer))
    }

    pub fn take_partial(&mut self) -> Option<Vec<Envelope>> {
        (!self.buffer.is_empty()).then(|| std::mem::take(&mut self.buffer))
    }
}

/// The durable state of one channel at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeState {
    pub next_block_number: u64,
    pub prev_header_hash: Digest,
}

impl Default for NodeState {
    fn default() -> Self {
        Self {
            next_block_number: 0,
            prev_header_hash: Digest([0u8; DIGEST_LEN]),
        }
    }
}

impl NodeState {
    /// Builds the next header over `envelopes` and advances the state.
    pub fn cut_block(&mut self, envelopes: &[Envelope]) -> BlockHeader {
        let header = BlockHeader {
            number: self.next_block_number,
            prev_hash: self.prev_header_hash,
            data_hash: data_hash(envelopes),
        };
        self.next_block_number += 1;
        self.prev_header_hash = header.hash();
        header
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelState {
    pub cutter: BlockCutter,
    pub state: NodeState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutBlock {
    pub channel: String,
    pub header: BlockHeader,
    pub envelopes: Vec<Envelope>,
    /// Consensus instance whose delivery completed the block.
    pub instance: u64,
}

/// Everything a node derives from the ordered envelope stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingState {
    pub block_size: usize,
    pub last_instance: u64,
    pub channels: BTreeMap<String, ChannelState>,
}

impl OrderingState {
    pub fn new(block_size: usize) -> Self {
        Self {
            block_size,
            last_instance: 0,
            channels: BTreeMap::new(),
        }
    }

    fn channel(&mut self, id: &str) -> &mut ChannelState {
        let bs = self.block_size;
        self.channels.entry(id.to_string()).or_insert_with(|| ChannelState {
            cutter: BlockCutter::new(id, bs),
            state: NodeState::default(),
        })
    }

    pub fn node_state(&self, channel: &str) -> Option<NodeState> {
        self.channels.get(channel).map(|c| c.state)
    }

    pub fn buffered(&self, channel: &str) -> usize {
        self.channels.get(channel).map_or(0, |c| c.cutter.buffer.len())
    }

    /// Feeds one delivered batch through the cutters.
    pub fn apply(&mut self, instance: u64, envelopes: &[Envelope]) -> Vec<CutBlock> {
        self.last_instance = instance;
        let mut cut = Vec::new();
        for env in envelopes {
            if is_ttc(env) {
                let Some(target) = ttc_target(env) else { continue };
                let Some(ch) = self.channels.get_mut(&env.channel_id) else {
                    continue;
                };
                if ch.state.next_block_number != target {
                    continue;
                }
                if let Some(envs) = ch.cutter.take_partial() {
                    let header = ch.state.cut_block(&envs);
                    cut.push(CutBlock {
                        channel: env.channel_id.clone(),
                        header,
                        envelopes: envs,
                        instance,
                    });
                }
                continue;
            }
            let ch = self.channel(&env.channel_id);
            if let Some(envs) = ch.cutter.push(env.clone()) {
                let header = ch.state.cut_block(&envs);
                cut.push(CutBlock {
                    channel: env.channel_id.clone(),
                    header,
                    envelopes: envs,
                    instance,
                });
            }
        }
        cut
    }
}
