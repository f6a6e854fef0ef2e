// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Byzantine fault-tolerant total-order broadcast and a block ordering
//! service built on top of it.

pub mod bench;
pub mod codec;
pub mod config;
pub mod consensus;
pub mod crypto;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod node;
pub mod scenario;
pub mod transport;
pub mod types;
