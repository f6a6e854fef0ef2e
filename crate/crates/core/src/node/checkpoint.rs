// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Checkpoints of the ordering state plus the log of delivered batches
//! since the last checkpoint.
//!
//! Checkpoint file: magic `BFCK`, version u16, last instance u64, block
//! size u32, channel count u32, then per channel: channel id (u16 length,
//! bytes), next block number u64, previous header hash (32 bytes),
//! buffered envelopes (envelope list). A SHA-256 of all preceding bytes
//! closes the file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::cutter::{BlockCutter, ChannelState, NodeState, OrderingState};
use crate::codec::{Reader, Writer};
use crate::crypto::{self, Digest, DIGEST_LEN};
use crate::error::{CheckpointError, DecodeError};
use crate::types::{decode_envelopes_from, encode_envelopes_into, Envelope};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BFCK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DEFAULT_CHECKPOINT_PERIOD: u64 = 1024;

const LATEST: &str = "checkpoint.latest";
const PREVIOUS: &str = "checkpoint.prev";
const LOG: &str = "log.active";
const RETAINED: &str = "log.retained";

pub fn encode_checkpoint(state: &OrderingState) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(CHECKPOINT_MAGIC)
        .u16(CHECKPOINT_VERSION)
        .u64(state.last_instance)
        .u32(state.block_size as u32)
        .u32(state.channels.len() as u32);
    for (id, ch) in &state.channels {
        w.bytes16(id.as_bytes())
            .u64(ch.state.next_block_number)
            .raw(&ch.state.prev_header_hash.0);
        encode_envelopes_into(&ch.cutter.buffer, &mut w);
    }
    let mut out = w.finish();
    let sum = crypto::hash(&out);
    out.extend_from_slice(&sum.0);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<OrderingState, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + DIGEST_LEN {
        return Err(CheckpointError::Corrupt("too short".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if crypto::hash(body).0 != sum {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let corrupt = |e: DecodeError| CheckpointError::Corrupt(e.to_string());
    let mut r = Reader::new(body);
    if r.take(4).map_err(corrupt)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = r.u16().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let last_instance = r.u64().map_err(corrupt)?;
    let block_size = r.u32().map_err(corrupt)? as usize;
    if block_size == 0 {
        return Err(CheckpointError::Corrupt("zero block size".into()));
    }
    let count = r.u32().map_err(corrupt)?;
    let mut state = OrderingState::new(block_size);
    state.last_instance = last_instance;
    for _ in 0..count {
        let id = String::from_utf8(r.bytes16().map_err(corrupt)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("channel id not utf-8".into()))?;
        let next_block_number = r.u64().map_err(corrupt)?;
        let prev_header_hash = Digest(r.array().map_err(corrupt)?);
        let buffer = decode_envelopes_from(&mut r).map_err(corrupt)?;
        let mut cutter = BlockCutter::new(id.clone(), block_size);
        cutter.buffer = buffer;
        state.channels.insert(
            id,
            ChannelState {
                cutter,
                state: NodeState {
                    next_block_number,
                    prev_header_hash,
                },
            },
        );
    }
    r.finish().map_err(corrupt)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub instance: u64,
    pub envelopes: Vec<Envelope>,
}

impl LogEntry {
    fn encode_into(&self, w: &mut Writer) {
        let mut inner = Writer::new();
        encode_envelopes_into(&self.envelopes, &mut inner);
        w.u64(self.instance).bytes32(&inner.finish());
    }

    fn decode_all(bytes: &[u8]) -> Result<Vec<LogEntry>, DecodeError> {
        let mut r = Reader::new(bytes);
        let mut out = Vec::new();
        while r.remaining() > 0 {
            let instance = r.u64()?;
            let raw = r.bytes32()?;
            let mut inner = Reader::new(raw);
            let envelopes = decode_envelopes_from(&mut inner)?;
            inner.finish()?;
            out.push(LogEntry { instance, envelopes });
        }
        Ok(out)
    }
}

/// Checkpoints and operation log of one node. The log is truncated at
/// every checkpoint, but the segment between the previous and the latest
/// checkpoint is retained so that a corrupt latest checkpoint can be
/// bypassed with a longer replay.
#[derive(Debug)]
pub struct CheckpointStore {
    dir: Option<PathBuf>,
    period: u64,
    block_size: usize,
    latest: Option<Vec<u8>>,
    previous: Option<Vec<u8>>,
    log: Vec<LogEntry>,
    retained: Vec<LogEntry>,
    taken: u64,
}

impl CheckpointStore {
    pub fn in_memory(period: u64, block_size: usize) -> Self {
        Self {
            dir: None,
            period: period.max(1),
            block_size,
            latest: None,
            previous: None,
            log: Vec::new(),
            retained: Vec::new(),
            taken: 0,
        }
    }

    /// Opens (or creates) a store in `dir`, loading whatever it holds.
    pub fn open(dir: &Path, period: u64, block_size: usize) -> Result<Self, CheckpointError> {
        fs::create_dir_all(dir)?;
        let read = |name: &str| -> Result<Option<Vec<u8>>, CheckpointError> {
            match fs::read(dir.join(name)) {
                Ok(b) => Ok(Some(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let log_of = |name: &str| -> Result<Vec<LogEntry>, CheckpointError> {
            match read(name)? {
                Some(b) => LogEntry::decode_all(&b).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}"))),
                None => Ok(Vec::new()),
            }
        };
        let mut store = Self::in_memory(period, block_size);
        store.latest = read(LATEST)?;
        store.previous = read(PREVIOUS)?;
        store.log = log_of(LOG)?;
        store.retained = log_of(RETAINED)?;
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn checkpoints_taken(&self) -> u64 {
        self.taken
    }

    pub fn latest_bytes(&self) -> Option<&[u8]> {
        self.latest.as_deref()
    }

    /// Records a finally delivered batch.
    pub fn append(&mut self, instance: u64, envelopes: &[Envelope]) -> Result<(), CheckpointError> {
        let entry = LogEntry {
            instance,
            envelopes: envelopes.to_vec(),
        };
        if let Some(dir) = &self.dir {
            let mut w = Writer::new();
            entry.encode_into(&mut w);
            let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(LOG))?;
            f.write_all(&w.finish())?;
        }
        self.log.push(entry);
        Ok(())
    }

    /// Takes a checkpoint if `state` sits on a period boundary.
    pub fn maybe_checkpoint(&mut self, state: &OrderingState) -> Result<bool, CheckpointError> {
        if state.last_instance == 0 || !state.last_instance.is_multiple_of(self.period) {
            return Ok(false);
        }
        self.checkpoint(state)?;
        Ok(true)
    }

    pub fn checkpoint(&mut self, state: &OrderingState) -> Result<(), CheckpointError> {
        let bytes = encode_checkpoint(state);
        if let Some(dir) = &self.dir {
            if self.latest.is_some() {
                fs::rename(dir.join(LATEST), dir.join(PREVIOUS))?;
            }
            write_atomic(&dir.join(LATEST), &bytes)?;
            let _ = fs::remove_file(dir.join(RETAINED));
            if dir.join(LOG).exists() {
                fs::rename(dir.join(LOG), dir.join(RETAINED))?;
            }
        }
        self.previous = self.latest.replace(bytes);
        self.retained = std::mem::take(&mut self.log);
        self.taken += 1;
        Ok(())
    }

    /// Rebuilds the ordering state: latest checkpoint plus the log, or the
    /// previous checkpoint plus the retained segment and the log when the
    /// latest one does not decode.
    pub fn restore(&self) -> Result<OrderingState, CheckpointError> {
        if let Some(bytes) = &self.latest {
            match decode_checkpoint(bytes) {
                Ok(state) => return Ok(replay(state, &self.log)),
                Err(e) => log::warn!("latest checkpoint unusable ({e}), falling back"),
            }
        }
        let base = match &self.previous {
            Some(bytes) => decode_checkpoint(bytes)?,
            None if self.latest.is_none() || self.taken_from_genesis() => OrderingState::new(self.block_size),
            None => return Err(CheckpointError::NoCheckpoint),
        };
        let state = replay(base, &self.retained);
        Ok(replay(state, &self.log))
    }

    /// True while the retained segment still starts at instance 1, so a
    /// replay from genesis is complete.
    fn taken_from_genesis(&self) -> bool {
        self.retained.first().is_none_or(|e| e.instance == 1)
    }

    /// Test hook: damages the latest checkpoint in memory and on disk.
    pub fn corrupt_latest(&mut self) -> Result<(), CheckpointError> {
        if let Some(b) = self.latest.as_mut() {
            let mid = b.len() / 2;
            b[mid] ^= 0xFF;
            if let Some(dir) = &self.dir {
                write_atomic(&dir.join(LATEST), b)?;
            }
        }
        Ok(())
    }
}

pub fn replay(mut state: OrderingState, log: &[LogEntry]) -> OrderingState {
    for e in log {
        if e.instance > state.last_instance {
            state.apply(e.instance, &e.envelopes);
        }
    }
    state
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(i: u64) -> Vec<Envelope> {
        (0..(i % 7) + 1)
            .map(|k| Envelope::new(if k % 2 == 0 { "a" } else { "b" }, 3, i * 10 + k, vec![k as u8; 5]))
            .collect()
    }

    fn run(store: &mut CheckpointStore, from: u64, to: u64, state: &mut OrderingState) {
        for i in from..=to {
            let b = batch(i);
            state.apply(i, &b);
            store.append(i, &b).unwrap();
            store.maybe_checkpoint(state).unwrap();
        }
    }

    #[test]
    fn encoding_round_trips() {
        let mut s = OrderingState::new(4);
        s.apply(9, &batch(9));
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..4], b"BFCK");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), s);
    }

    #[test]
    fn checksum_catches_damage() {
        let s = OrderingState::new(4);
        let mut bytes = encode_checkpoint(&s);
        bytes[6] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn restore_with_empty_log_is_the_checkpoint() {
        let mut store = CheckpointStore::in_memory(5, 4);
        let mut s = OrderingState::new(4);
        run(&mut store, 1, 10, &mut s);
        assert_eq!(store.log_len(), 0);
        assert_eq!(store.restore().unwrap(), s);
    }

    #[test]
    fn log_is_truncated_at_checkpoints() {
        let mut store = CheckpointStore::in_memory(8, 4);
        let mut s = OrderingState::new(4);
        run(&mut store, 1, 21, &mut s);
        assert_eq!(store.checkpoints_taken(), 2);
        assert!(store.log_len() as u64 <= 21 - 16);
        assert_eq!(store.restore().unwrap(), s);
    }

    #[test]
    fn corrupt_latest_falls_back_to_previous() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::open(dir.path(), 4, 3).unwrap();
        let mut s = OrderingState::new(3);
        run(&mut store, 1, 13, &mut s);
        store.corrupt_latest().unwrap();
        let reopened = CheckpointStore::open(dir.path(), 4, 3).unwrap();
        assert_eq!(reopened.restore().unwrap(), s);
    }
}
