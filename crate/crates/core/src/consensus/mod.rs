// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Total-order broadcast: PROPOSE / WRITE / ACCEPT with weighted quorums,
//! tentative execution and a leader change driven by STOP messages.

pub mod config;
pub mod instance;
pub mod message;
pub mod pool;
pub mod replica;
pub mod sync;

pub use config::{classic_threshold, quorum_reached, ClusterConfig, Mode};
pub use message::{Batch, Body, Kind, ProtocolMessage, StopData, SyncPlan};
pub use replica::{Action, Delivery, Replica, ReplicaTimer, RequestAck, TimerKind};
