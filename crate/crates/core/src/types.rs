// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Envelopes, block headers and blocks, with their canonical encodings.

use std::collections::BTreeMap;

use crate::codec::{Reader, Writer};
use crate::crypto::{self, Digest, KeyPair, NodeId, PublicKeyDirectory, DIGEST_LEN};
use crate::error::{CryptoError, DecodeError};

pub const MAX_CHANNEL_ID_LEN: usize = 64;
pub const MAX_PAYLOAD_LEN: usize = 16 << 20;
pub const HEADER_LEN: usize = 8 + DIGEST_LEN + DIGEST_LEN;

pub type ClientId = u64;

/// An opaque client transaction. The ordering service never looks inside
/// `payload`; `(client_id, seq)` identifies the envelope within a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub channel_id: String,
    pub client_id: ClientId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(channel_id: impl Into<String>, client_id: ClientId, seq: u64, payload: Vec<u8>) -> Self {
        Self {
            channel_id: channel_id.into(),
            client_id,
            seq,
            payload,
        }
    }

    pub fn key(&self) -> (ClientId, u64) {
        (self.client_id, self.seq)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.channel_id.is_empty() || self.channel_id.len() > MAX_CHANNEL_ID_LEN {
            return Err(DecodeError::Invalid(format!(
                "channel id length {} outside 1..={MAX_CHANNEL_ID_LEN}",
                self.channel_id.len()
            )));
        }
        if self.payload.len() > MAX_PAYLOAD_LEN {
            return Err(DecodeError::Invalid(format!(
                "payload of {} bytes exceeds {MAX_PAYLOAD_LEN}",
                self.payload.len()
            )));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.channel_id.len() + 8 + 8 + 4 + self.payload.len()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.bytes16(self.channel_id.as_bytes())
            .u64(self.client_id)
            .u64(self.seq)
            .bytes32(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let channel = r.bytes16()?;
        let channel_id =
            String::from_utf8(channel.to_vec()).map_err(|_| DecodeError::Invalid("channel id is not utf-8".into()))?;
        let env = Envelope {
            channel_id,
            client_id: r.u64()?,
            seq: r.u64()?,
            payload: r.bytes32()?.to_vec(),
        };
        env.validate()?;
        Ok(env)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let env = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(env)
    }
}

/// Canonical envelope-list encoding: a u32 count, then each envelope's
/// canonical bytes behind a u32 length.
pub fn encode_envelopes(envs: &[Envelope]) -> Vec<u8> {
    let cap = 4 + envs.iter().map(|e| 4 + e.encoded_len()).sum::<usize>();
    let mut w = Writer::with_capacity(cap);
    encode_envelopes_into(envs, &mut w);
    w.finish()
}

pub fn encode_envelopes_into(envs: &[Envelope], w: &mut Writer) {
    w.u32(envs.len() as u32);
    for e in envs {
        w.u32(e.encoded_len() as u32);
        e.encode_into(w);
    }
}

pub fn decode_envelopes_from(r: &mut Reader<'_>) -> Result<Vec<Envelope>, DecodeError> {
    let count = r.u32()? as usize;
    // Every envelope takes at least 26 bytes; reject counts the input cannot hold.
    if count > r.remaining() / 26 + 1 {
        return Err(DecodeError::Invalid(format!("envelope count {count} too large")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let body = r.bytes32()?;
        out.push(Envelope::from_bytes(body)?);
    }
    Ok(out)
}

pub fn decode_envelopes(bytes: &[u8]) -> Result<Vec<Envelope>, DecodeError> {
    let mut r = Reader::new(bytes);
    let envs = decode_envelopes_from(&mut r)?;
    r.finish()?;
    Ok(envs)
}

pub fn data_hash(envs: &[Envelope]) -> Digest {
    crypto::hash(&encode_envelopes(envs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
}

impl BlockHeader {
    pub fn genesis(data_hash: Digest) -> Self {
        Self {
            number: 0,
            prev_hash: Digest::ZERO,
            data_hash,
        }
    }

    /// Fixed 72-byte encoding: number (big-endian u64), prev_hash, data_hash.
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.number.to_be_bytes());
        out[8..40].copy_from_slice(&self.prev_hash.0);
        out[40..].copy_from_slice(&self.data_hash.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let h = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(h)
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            number: r.u64()?,
            prev_hash: Digest(r.array()?),
            data_hash: Digest(r.array()?),
        })
    }

    pub fn hash(&self) -> Digest {
        crypto::hash(&self.to_bytes())
    }
}

pub fn sign_header(header: &BlockHeader, key: &KeyPair) -> Vec<u8> {
    key.sign(&header.to_bytes()).to_vec()
}

pub fn verify_header_sig(
    header: &BlockHeader,
    sig: &[u8],
    node: NodeId,
    dir: &PublicKeyDirectory,
) -> Result<bool, CryptoError> {
    dir.verify(node, &header.to_bytes(), sig)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub envelopes: Vec<Envelope>,
    pub signatures: BTreeMap<NodeId, Vec<u8>>,
}

impl Block {
    /// Unsigned block over `envelopes` chained after `prev_hash`.
    pub fn make(number: u64, prev_hash: Digest, envelopes: Vec<Envelope>) -> Self {
        let header = BlockHeader {
            number,
            prev_hash,
            data_hash: data_hash(&envelopes),
        };
        Self {
            header,
            envelopes,
            signatures: BTreeMap::new(),
        }
    }

    pub fn sign_with(&mut self, node: NodeId, key: &KeyPair) {
        self.signatures.insert(node, sign_header(&self.header, key));
    }

    /// Number of attached signatures that verify under `dir`; unknown signers count as invalid.
    pub fn valid_signatures(&self, dir: &PublicKeyDirectory) -> usize {
        let header = self.header.to_bytes();
        self.signatures
            .iter()
            .filter(|(node, sig)| dir.verify(**node, &header, sig).unwrap_or(false))
            .count()
    }

    pub fn data_matches(&self) -> bool {
        data_hash(&self.envelopes) == self.header.data_hash
    }

    /// Header, envelope list, then a u16 count of `(node, u16-length signature)`
    /// pairs in ascending node order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.raw(&self.header.to_bytes());
        encode_envelopes_into(&self.envelopes, w);
        w.u16(self.signatures.len() as u16);
        for (node, sig) in &self.signatures {
            w.u16(*node).bytes16(sig);
        }
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let header = BlockHeader::decode_from(r)?;
        let envelopes = decode_envelopes_from(r)?;
        let count = r.u16()?;
        let mut signatures = BTreeMap::new();
        let mut last: Option<NodeId> = None;
        for _ in 0..count {
            let node = r.u16()?;
            if last.is_some_and(|l| node <= l) {
                return Err(DecodeError::Invalid("signatures not in ascending node order".into()));
            }
            last = Some(node);
            signatures.insert(node, r.bytes16()?.to_vec());
        }
        Ok(Self {
            header,
            envelopes,
            signatures,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let b = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(b)
    }

    /// Dissemination encoding: u16-length channel id, then the block bytes.
    pub fn to_wire(&self, channel_id: &str) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes16(channel_id.as_bytes());
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<(String, Self), DecodeError> {
        let mut r = Reader::new(bytes);
        let channel = String::from_utf8(r.bytes16()?.to_vec())
            .map_err(|_| DecodeError::Invalid("channel id is not utf-8".into()))?;
        let block = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok((channel, block))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainViolation {
    /// Header number is not the predecessor's number plus one.
    NonConsecutive,
    /// prev_hash differs from the hash of the preceding header (or the genesis anchor).
    PrevHashMismatch,
    /// data_hash differs from the hash of the block's envelope list.
    DataHashMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainCheck {
    Valid,
    Broken { number: u64, reason: ChainViolation },
}

impl ChainCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainCheck::Valid)
    }
}

/// Checks numbering, hash links and data hashes of an ordered run of blocks.
/// Signatures are not examined.
pub fn verify_chain(blocks: &[Block], genesis_prev: Digest) -> ChainCheck {
    let mut expected_prev = genesis_prev;
    let mut expected_number: Option<u64> = None;
    for b in blocks {
        let number = b.header.number;
        if let Some(n) = expected_number {
            if number != n {
                return ChainCheck::Broken {
                    number,
                    reason: ChainViolation::NonConsecutive,
                };
            }
        }
        if b.header.prev_hash != expected_prev {
            return ChainCheck::Broken {
                number,
                reason: ChainViolation::PrevHashMismatch,
            };
        }
        if !b.data_matches() {
            return ChainCheck::Broken {
                number,
                reason: ChainViolation::DataHashMismatch,
            };
        }
        expected_prev = b.header.hash();
        expected_number = Some(number.wrapping_add(1));
    }
    ChainCheck::Valid
}
