// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Message transport shared by replicas, ordering nodes and frontends.
//!
//! Components are written as [`Actor`]s that react to messages, timers and
//! completed offloaded jobs through a [`Context`]. The same actor runs
//! unchanged inside the discrete-event simulator and over TCP.

use std::any::Any;
use std::time::Duration;

use bytes::Bytes;

use crate::error::TransportError;

pub mod faults;
pub mod latency;
pub mod sim;
pub mod tcp;

/// Address of an actor. Ordering nodes use their node id; frontends use
/// `FRONTEND_BASE + index`.
pub type EndpointId = u16;

pub const FRONTEND_BASE: EndpointId = 1000;

pub fn frontend_endpoint(index: usize) -> EndpointId {
    FRONTEND_BASE + index as EndpointId
}

pub fn is_frontend(ep: EndpointId) -> bool {
    ep >= FRONTEND_BASE
}

pub fn endpoint_label(ep: EndpointId) -> String {
    if is_frontend(ep) {
        format!("f{}", ep - FRONTEND_BASE)
    } else {
        format!("n{ep}")
    }
}

/// A CPU-bound job run off the actor's event loop. The result comes back
/// through [`Actor::on_offload_done`].
pub type Job = Box<dyn FnOnce() -> Vec<u8> + Send>;

pub trait Context {
    fn now(&self) -> Duration;
    fn send(&mut self, to: EndpointId, bytes: Bytes) -> Result<(), TransportError>;
    /// Sends without charging event-loop time, for work already paid for by
    /// an offloaded job.
    fn send_prepaid(&mut self, to: EndpointId, bytes: Bytes) -> Result<(), TransportError> {
        self.send(to, bytes)
    }
    fn set_timer(&mut self, after: Duration, token: u64);
    /// Runs `job` on one of the actor's workers. `cost` is the virtual
    /// duration the simulator charges for it; real transports ignore it.
    fn offload(&mut self, job: Job, cost: Duration, tag: u64);
    /// Charges event-loop CPU time in the simulator; a no-op elsewhere.
    fn charge(&mut self, _cost: Duration) {}
}

pub trait Actor: Send {
    fn endpoint(&self) -> EndpointId;
    /// Number of workers available to [`Context::offload`].
    fn workers(&self) -> usize {
        1
    }
    fn on_start(&mut self, ctx: &mut dyn Context);
    fn on_message(&mut self, ctx: &mut dyn Context, from: EndpointId, bytes: Bytes);
    fn on_timer(&mut self, ctx: &mut dyn Context, token: u64);
    fn on_offload_done(&mut self, _ctx: &mut dyn Context, _tag: u64, _result: Vec<u8>) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Virtual CPU and network costs used by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// Event-loop time per received message.
    pub per_message: Duration,
    /// Additional receive time per payload byte, in nanoseconds.
    pub per_byte_ns: f64,
    /// Event-loop time per send.
    pub per_send: Duration,
    pub per_send_byte_ns: f64,
    /// NIC egress bandwidth in bits per second; `None` means unlimited.
    pub nic_bps: Option<f64>,
}

impl CostModel {
    pub fn free() -> Self {
        Self {
            per_message: Duration::ZERO,
            per_byte_ns: 0.0,
            per_send: Duration::ZERO,
            per_send_byte_ns: 0.0,
            nic_bps: None,
        }
    }

    /// Desk-scale defaults used by the benchmarks.
    pub fn lan() -> Self {
        Self {
            per_message: Duration::from_micros(5),
            per_byte_ns: 1.0,
            per_send: Duration::from_micros(2),
            per_send_byte_ns: 0.5,
            nic_bps: Some(1e9),
        }
    }

    pub fn receive_cost(&self, len: usize) -> Duration {
        self.per_message + Duration::from_nanos((self.per_byte_ns * len as f64) as u64)
    }

    pub fn send_cost(&self, len: usize) -> Duration {
        self.per_send + Duration::from_nanos((self.per_send_byte_ns * len as f64) as u64)
    }

    pub fn wire_time(&self, len: usize) -> Duration {
        match self.nic_bps {
            Some(bps) => Duration::from_nanos(((len as f64 + 4.0) * 8.0 / bps * 1e9) as u64),
            None => Duration::ZERO,
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::free()
    }
}
