// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::crypto::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated input at byte {at}: wanted {wanted}, {available} available")]
    Truncated { at: usize, wanted: usize, available: usize },
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("invalid field: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("malformed signing key")]
    MalformedKey,
    #[error("malformed public key")]
    MalformedPublicKey,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("key file {path}: {reason}")]
    KeyFile { path: String, reason: String },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid cluster: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum QuorumError {
    #[error("vote from unknown node {0}")]
    UnknownVoter(NodeId),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("no usable checkpoint")]
    NoCheckpoint,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(u16),
    #[error("endpoint {0} unreachable")]
    Unreachable(u16),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Frame(String),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("cluster decided nothing during the run")]
    NoProgress,
    #[error("missing calibration input: {0}")]
    MissingCalibration(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
