// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Protocol messages and their wire encoding.
//!
//! Every message shares one header: kind (u8), instance (u64), regency
//! (u64), sender (u16), body length (u32), all big-endian, then the body.

use std::sync::Arc;

use bytes::Bytes;

use crate::codec::{Reader, Writer};
use crate::crypto::{self, Digest, NodeId};
use crate::error::DecodeError;
use crate::types::{decode_envelopes_from, encode_envelopes, encode_envelopes_into, Envelope};

pub const MESSAGE_HEADER_LEN: usize = 1 + 8 + 8 + 2 + 4;

/// A proposed batch together with its digest (the hash of its canonical
/// envelope-list encoding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub envelopes: Vec<Envelope>,
    pub digest: Digest,
}

impl Batch {
    pub fn new(envelopes: Vec<Envelope>) -> Self {
        let digest = crypto::hash(&encode_envelopes(&envelopes));
        Self { envelopes, digest }
    }

    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let envelopes = decode_envelopes_from(&mut r)?;
        r.finish()?;
        Ok(Self {
            envelopes,
            digest: crypto::hash(bytes),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Propose = 0x01,
    Write = 0x02,
    Accept = 0x03,
    Request = 0x04,
    Stop = 0x05,
    Sync = 0x06,
    StopData = 0x07,
    Fetch = 0x08,
    BatchReply = 0x09,
    Block = 0x10,
    Register = 0x11,
    Hello = 0x12,
}

impl Kind {
    pub const ALL: [Kind; 12] = [
        Kind::Propose,
        Kind::Write,
        Kind::Accept,
        Kind::Request,
        Kind::Stop,
        Kind::Sync,
        Kind::StopData,
        Kind::Fetch,
        Kind::BatchReply,
        Kind::Block,
        Kind::Register,
        Kind::Hello,
    ];

    pub fn from_u8(b: u8) -> Result<Self, DecodeError> {
        Kind::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or(DecodeError::UnknownKind(b))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kind::Propose => "PROPOSE",
            Kind::Write => "WRITE",
            Kind::Accept => "ACCEPT",
            Kind::Request => "REQUEST",
            Kind::Stop => "STOP",
            Kind::Sync => "SYNC",
            Kind::StopData => "STOPDATA",
            Kind::Fetch => "FETCH",
            Kind::BatchReply => "BATCH",
            Kind::Block => "BLOCK",
            Kind::Register => "REGISTER",
            Kind::Hello => "HELLO",
        }
    }
}

/// A replica's state report after installing a new regency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopData {
    /// Highest instance finally decided by the reporter (0 = none).
    pub last_decided: u64,
    /// The most recent decided batches, ascending by instance.
    pub decided_tail: Vec<(u64, Arc<Batch>)>,
    /// For instance `last_decided + 1`: the batch the reporter saw a WRITE
    /// quorum for, and in which regency.
    pub lock: Option<(u64, Arc<Batch>)>,
}

/// The new leader's plan for the first instances of its regency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncPlan {
    /// Reporters whose STOPDATA the plan was computed from, ascending.
    pub reporters: Vec<NodeId>,
    /// Consecutive `(instance, batch)` entries to decide in the new regency.
    pub entries: Vec<(u64, Arc<Batch>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Propose(Arc<Batch>),
    Write(Digest),
    Accept(Digest),
    Request(Envelope),
    Stop,
    Sync(SyncPlan),
    StopData(StopData),
    Fetch(Digest),
    BatchReply(Arc<Batch>),
    /// A block in dissemination encoding (channel-prefixed); `instance` holds the block number.
    Block(Bytes),
    Register,
    Hello,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub instance: u64,
    pub regency: u64,
    pub sender: NodeId,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn new(instance: u64, regency: u64, sender: NodeId, body: Body) -> Self {
        Self {
            instance,
            regency,
            sender,
            body,
        }
    }

    pub fn kind(&self) -> Kind {
        match &self.body {
            Body::Propose(_) => Kind::Propose,
            Body::Write(_) => Kind::Write,
            Body::Accept(_) => Kind::Accept,
            Body::Request(_) => Kind::Request,
            Body::Stop => Kind::Stop,
            Body::Sync(_) => Kind::Sync,
            Body::StopData(_) => Kind::StopData,
            Body::Fetch(_) => Kind::Fetch,
            Body::BatchReply(_) => Kind::BatchReply,
            Body::Block(_) => Kind::Block,
            Body::Register => Kind::Register,
            Body::Hello => Kind::Hello,
        }
    }

    pub fn encode(&self) -> Bytes {
        let mut body = Writer::new();
        match &self.body {
            Body::Propose(b) | Body::BatchReply(b) => encode_envelopes_into(&b.envelopes, &mut body),
            Body::Write(d) | Body::Accept(d) | Body::Fetch(d) => {
                body.raw(&d.0);
            }
            Body::Request(e) => e.encode_into(&mut body),
            Body::Stop | Body::Register | Body::Hello => {}
            Body::Sync(plan) => {
                body.u16(plan.reporters.len() as u16);
                for r in &plan.reporters {
                    body.u16(*r);
                }
                body.u32(plan.entries.len() as u32);
                for (inst, b) in &plan.entries {
                    body.u64(*inst).bytes32(&encode_envelopes(&b.envelopes));
                }
            }
            Body::StopData(sd) => {
                body.u64(sd.last_decided);
                body.u16(sd.decided_tail.len() as u16);
                for (inst, b) in &sd.decided_tail {
                    body.u64(*inst).bytes32(&encode_envelopes(&b.envelopes));
                }
                match &sd.lock {
                    None => {
                        body.u8(0);
                    }
                    Some((reg, b)) => {
                        body.u8(1).u64(*reg).bytes32(&encode_envelopes(&b.envelopes));
                    }
                }
            }
            Body::Block(bytes) => {
                body.raw(bytes);
            }
        }
        let body = body.finish();
        let mut w = Writer::with_capacity(MESSAGE_HEADER_LEN + body.len());
        w.u8(self.kind() as u8)
            .u64(self.instance)
            .u64(self.regency)
            .u16(self.sender)
            .bytes32(&body);
        Bytes::from(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = Kind::from_u8(r.u8()?)?;
        let instance = r.u64()?;
        let regency = r.u64()?;
        let sender = r.u16()?;
        let raw = r.bytes32()?;
        r.finish()?;
        let digest = |raw: &[u8]| -> Result<Digest, DecodeError> {
            let mut r = Reader::new(raw);
            let d = Digest(r.array()?);
            r.finish()?;
            Ok(d)
        };
        let empty = |raw: &[u8]| -> Result<(), DecodeError> {
            if raw.is_empty() {
                Ok(())
            } else {
                Err(DecodeError::TrailingBytes(raw.len()))
            }
        };
        let body = match kind {
            Kind::Propose => Body::Propose(Arc::new(Batch::decode(raw)?)),
            Kind::BatchReply => Body::BatchReply(Arc::new(Batch::decode(raw)?)),
            Kind::Write => Body::Write(digest(raw)?),
            Kind::Accept => Body::Accept(digest(raw)?),
            Kind::Fetch => Body::Fetch(digest(raw)?),
            Kind::Request => Body::Request(Envelope::from_bytes(raw)?),
            Kind::Stop => {
                empty(raw)?;
                Body::Stop
            }
            Kind::Register => {
                empty(raw)?;
                Body::Register
            }
            Kind::Hello => {
                empty(raw)?;
                Body::Hello
            }
            Kind::Sync => {
                let mut r = Reader::new(raw);
                let nrep = r.u16()? as usize;
                let mut reporters = Vec::with_capacity(nrep);
                for _ in 0..nrep {
                    reporters.push(r.u16()?);
                }
                let nent = r.u32()? as usize;
                if nent > r.remaining() / 12 + 1 {
                    return Err(DecodeError::Invalid("sync entry count too large".into()));
                }
                let mut entries = Vec::with_capacity(nent);
                for _ in 0..nent {
                    let inst = r.u64()?;
                    entries.push((inst, Arc::new(Batch::decode(r.bytes32()?)?)));
                }
                r.finish()?;
                Body::Sync(SyncPlan { reporters, entries })
            }
            Kind::StopData => {
                let mut r = Reader::new(raw);
                let last_decided = r.u64()?;
                let ntail = r.u16()? as usize;
                let mut decided_tail = Vec::with_capacity(ntail);
                for _ in 0..ntail {
                    let inst = r.u64()?;
                    decided_tail.push((inst, Arc::new(Batch::decode(r.bytes32()?)?)));
                }
                let lock = match r.u8()? {
                    0 => None,
                    1 => {
                        let reg = r.u64()?;
                        Some((reg, Arc::new(Batch::decode(r.bytes32()?)?)))
                    }
                    other => return Err(DecodeError::Invalid(format!("lock tag {other}"))),
                };
                r.finish()?;
                Body::StopData(StopData {
                    last_decided,
                    decided_tail,
                    lock,
                })
            }
            Kind::Block => Body::Block(Bytes::copy_from_slice(raw)),
        };
        Ok(Self {
            instance,
            regency,
            sender,
            body,
        })
    }
}
