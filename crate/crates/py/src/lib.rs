// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Python bindings: envelopes, blocks and chains, keys, cluster quorums,
//! the block cutter, checkpoints, simulated runs and the throughput bound.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use bftorder::bench;
use bftorder::consensus::{self, Mode};
use bftorder::crypto::{self, Digest, NodeId};
use bftorder::frontend::{FrontendMode, LoadSpec};
use bftorder::node::checkpoint::{decode_checkpoint, encode_checkpoint};
use bftorder::scenario::{Scenario, ScenarioSpec};
use bftorder::transport::faults::FaultScript;
use bftorder::transport::latency::LatencyMatrix;
use bftorder::transport::CostModel;
use bftorder::types;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn digest(bytes: &[u8]) -> PyResult<Digest> {
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| PyValueError::new_err("digest must be 32 bytes"))?;
    Ok(Digest(arr))
}

#[pyclass(module = "bftorder_py", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct Envelope {
    inner: types::Envelope,
}

#[pymethods]
impl Envelope {
    #[new]
    fn new(channel_id: String, client_id: u64, seq: u64, payload: Vec<u8>) -> PyResult<Self> {
        let inner = types::Envelope::new(channel_id, client_id, seq, payload);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn channel_id(&self) -> &str {
        &self.inner.channel_id
    }

    #[getter]
    fn client_id(&self) -> u64 {
        self.inner.client_id
    }

    #[getter]
    fn seq(&self) -> u64 {
        self.inner.seq
    }

    #[getter]
    fn payload<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.payload)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        types::Envelope::from_bytes(bytes)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Envelope(channel_id={:?}, client_id={}, seq={}, payload=<{} bytes>)",
            self.inner.channel_id,
            self.inner.client_id,
            self.inner.seq,
            self.inner.payload.len()
        )
    }
}

#[pyclass(module = "bftorder_py", frozen, from_py_object)]
#[derive(Clone)]
struct Block {
    inner: types::Block,
}

#[pymethods]
impl Block {
    /// Unsigned block over `envelopes`, chained after `prev_hash`.
    #[staticmethod]
    fn make(number: u64, prev_hash: &[u8], envelopes: Vec<Envelope>) -> PyResult<Self> {
        let envs = envelopes.into_iter().map(|e| e.inner).collect();
        Ok(Self {
            inner: types::Block::make(number, digest(prev_hash)?, envs),
        })
    }

    #[getter]
    fn number(&self) -> u64 {
        self.inner.header.number
    }

    #[getter]
    fn prev_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.header.prev_hash.0)
    }

    #[getter]
    fn data_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.header.data_hash.0)
    }

    #[getter]
    fn envelopes(&self) -> Vec<Envelope> {
        self.inner
            .envelopes
            .iter()
            .map(|e| Envelope { inner: e.clone() })
            .collect()
    }

    #[getter]
    fn signers(&self) -> Vec<NodeId> {
        self.inner.signatures.keys().copied().collect()
    }

    /// The 72-byte header encoding that nodes sign.
    fn header_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.header.to_bytes())
    }

    fn header_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.header.hash().0)
    }

    /// A copy of this block with `node`'s signature added.
    fn signed(&self, node: NodeId, key: &KeyPair) -> Self {
        let mut inner = self.inner.clone();
        inner.sign_with(node, &key.inner);
        Self { inner }
    }

    fn valid_signatures(&self, directory: &Directory) -> usize {
        self.inner.valid_signatures(&directory.inner)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        types::Block::from_bytes(bytes)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Block(number={}, envelopes={}, signatures={})",
            self.inner.header.number,
            self.inner.envelopes.len(),
            self.inner.signatures.len()
        )
    }
}

/// Checks numbering, hash links and data hashes. Returns `None` for a valid
/// chain, else `(block_number, reason)`.
#[pyfunction]
#[pyo3(signature = (blocks, genesis_prev = None))]
fn verify_chain(blocks: Vec<Block>, genesis_prev: Option<&[u8]>) -> PyResult<Option<(u64, String)>> {
    let prev = match genesis_prev {
        Some(b) => digest(b)?,
        None => Digest::ZERO,
    };
    let blocks: Vec<types::Block> = blocks.into_iter().map(|b| b.inner).collect();
    Ok(match types::verify_chain(&blocks, prev) {
        types::ChainCheck::Valid => None,
        types::ChainCheck::Broken { number, reason } => Some((number, format!("{reason:?}"))),
    })
}

#[pyfunction]
fn sha256<'py>(py: Python<'py>, data: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &crypto::hash(data).0)
}

#[pyclass(module = "bftorder_py", frozen)]
struct KeyPair {
    inner: crypto::KeyPair,
}

#[pymethods]
impl KeyPair {
    /// Deterministic test key for `node` under `seed`.
    #[staticmethod]
    fn derive(seed: u64, node: NodeId) -> Self {
        Self {
            inner: crypto::KeyPair::derive(seed, node),
        }
    }

    #[staticmethod]
    fn from_secret(secret: &[u8]) -> PyResult<Self> {
        crypto::KeyPair::from_secret_bytes(secret)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn public_key<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.public_key_bytes())
    }

    /// 64-byte P-256 signature (r || s) over SHA-256 of `msg`.
    fn sign<'py>(&self, py: Python<'py>, msg: &[u8]) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.sign(msg))
    }
}

#[pyclass(module = "bftorder_py", frozen)]
struct Directory {
    inner: crypto::PublicKeyDirectory,
}

#[pymethods]
impl Directory {
    #[new]
    fn new(public_keys: BTreeMap<NodeId, Vec<u8>>) -> PyResult<Self> {
        let mut inner = crypto::PublicKeyDirectory::new();
        for (node, bytes) in public_keys {
            inner.insert(node, crypto::PublicKey::from_bytes(&bytes).map_err(value_err)?);
        }
        Ok(Self { inner })
    }

    fn verify(&self, node: NodeId, msg: &[u8], sig: &[u8]) -> PyResult<bool> {
        self.inner.verify(node, msg, sig).map_err(value_err)
    }
}

#[pyclass(module = "bftorder_py", frozen)]
struct Cluster {
    inner: consensus::ClusterConfig,
}

#[pymethods]
impl Cluster {
    #[staticmethod]
    fn classic(n: usize, f: usize) -> PyResult<Self> {
        consensus::ClusterConfig::classic(n, f)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// Weighted cluster of `3f+1+delta` replicas; `vmax_nodes` defaults to the first `2f`.
    #[staticmethod]
    #[pyo3(signature = (f, delta, vmax_nodes = None))]
    fn wheat(f: usize, delta: usize, vmax_nodes: Option<Vec<NodeId>>) -> PyResult<Self> {
        let r = match vmax_nodes {
            Some(v) => consensus::ClusterConfig::wheat(f, delta, &v),
            None => consensus::ClusterConfig::wheat_default(f, delta),
        };
        r.map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn f(&self) -> usize {
        self.inner.f
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn weights(&self) -> BTreeMap<NodeId, u32> {
        self.inner.weights.clone()
    }

    #[getter]
    fn threshold(&self) -> u64 {
        self.inner.threshold()
    }

    /// True iff the replicas in `voters` carry at least the threshold.
    fn is_quorum(&self, voters: BTreeSet<NodeId>) -> PyResult<bool> {
        let d = Digest::ZERO;
        let votes = voters.into_iter().map(|v| (v, d)).collect();
        consensus::quorum_reached(&votes, &d, &self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Cluster(mode={}, n={}, f={}, threshold={})",
            self.inner.mode,
            self.inner.n,
            self.inner.f,
            self.inner.threshold()
        )
    }
}

/// Per-channel block cutter state driven by decided batches.
#[pyclass(module = "bftorder_py")]
struct OrderingState {
    inner: bftorder::node::OrderingState,
}

#[pymethods]
impl OrderingState {
    #[new]
    fn new(block_size: usize) -> PyResult<Self> {
        if block_size == 0 {
            return Err(PyValueError::new_err("block_size must be positive"));
        }
        Ok(Self {
            inner: bftorder::node::OrderingState::new(block_size),
        })
    }

    /// Feeds one decided batch; returns the blocks it completed as `(channel, Block)`.
    fn apply(&mut self, instance: u64, envelopes: Vec<Envelope>) -> Vec<(String, Block)> {
        let envs: Vec<types::Envelope> = envelopes.into_iter().map(|e| e.inner).collect();
        self.inner
            .apply(instance, &envs)
            .into_iter()
            .map(|c| {
                let block = types::Block {
                    header: c.header,
                    envelopes: c.envelopes,
                    signatures: BTreeMap::new(),
                };
                (c.channel, Block { inner: block })
            })
            .collect()
    }

    #[getter]
    fn last_instance(&self) -> u64 {
        self.inner.last_instance
    }

    /// `(next_block_number, prev_header_hash)` of a channel, if seen.
    fn node_state<'py>(&self, py: Python<'py>, channel: &str) -> Option<(u64, Bound<'py, PyBytes>)> {
        self.inner
            .node_state(channel)
            .map(|s| (s.next_block_number, PyBytes::new(py, &s.prev_header_hash.0)))
    }

    fn buffered(&self, channel: &str) -> usize {
        self.inner.buffered(channel)
    }

    fn checkpoint<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_checkpoint(&self.inner))
    }

    #[staticmethod]
    fn restore(bytes: &[u8]) -> PyResult<Self> {
        decode_checkpoint(bytes).map(|inner| Self { inner }).map_err(value_err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Runs a simulated cluster under closed-loop load until every frontend has
/// delivered `clients * per_client` envelopes or `deadline_s` virtual
/// seconds pass, and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (cluster, frontends = 2, clients = 4, per_client = 10, block_size = 10, seed = 1, faults = "", frontend_mode = "match", deadline_s = 60.0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    cluster: &Cluster,
    frontends: usize,
    clients: usize,
    per_client: u64,
    block_size: usize,
    seed: u64,
    faults: &str,
    frontend_mode: &str,
    deadline_s: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if frontends == 0 || clients == 0 || block_size == 0 || deadline_s.is_nan() || deadline_s <= 0.0 {
        return Err(PyValueError::new_err(
            "frontends, clients, block_size and deadline must be positive",
        ));
    }
    let mut spec = ScenarioSpec::new(cluster.inner.clone(), frontends, seed);
    spec.block_size = block_size;
    spec.flush_timeout = Duration::from_millis(100);
    spec.frontend_mode = frontend_mode.parse::<FrontendMode>().map_err(value_err)?;
    spec.sim.latency = LatencyMatrix::uniform(0.2, 0.05);
    spec.sim.costs = CostModel::lan();
    spec.sim.faults = FaultScript::parse(faults).map_err(value_err)?;
    for k in 0..frontends {
        let mut load = LoadSpec::closed(clients, 4, 64);
        load.per_client = Some(per_client);
        spec.loads.push((k, load));
    }
    let byzantine = spec.sim.faults.byzantine();
    let correct: BTreeSet<NodeId> = cluster.inner.nodes().filter(|i| !byzantine.contains(i)).collect();
    let expected = clients * per_client as usize;
    let mut sc = Scenario::build(spec);
    let report = sc.run_until_delivered(expected, Duration::from_secs_f64(deadline_s));
    let agreement = sc.check_agreement(&correct);
    let out = PyDict::new(py);
    out.set_item("complete", report.is_complete())?;
    out.set_item("virtual_time_s", report.virtual_time.as_secs_f64())?;
    out.set_item("trace_hash", report.trace_hash.to_hex())?;
    out.set_item("messages", report.stats.sent)?;
    out.set_item(
        "delivered",
        (0..frontends)
            .map(|k| sc.frontend(k).delivery_counts().len())
            .collect::<Vec<_>>(),
    )?;
    out.set_item(
        "regency",
        cluster
            .inner
            .nodes()
            .map(|i| sc.node(i).replica().regency())
            .max()
            .unwrap_or(0),
    )?;
    match agreement {
        Ok(s) => {
            out.set_item("agreement", true)?;
            out.set_item("blocks", s.blocks)?;
        }
        Err(e) => {
            out.set_item("agreement", false)?;
            out.set_item("violation", e)?;
        }
    }
    Ok(out)
}

/// `measured <= min(sign_rate * block_size, raw_order_rate) * (1 + tolerance)`,
/// returned with the bound and which term set it.
#[pyfunction]
#[pyo3(signature = (measured, sign_rate, raw_order_rate, block_size, tolerance = 0.15))]
fn check_bound<'py>(
    py: Python<'py>,
    measured: f64,
    sign_rate: Option<f64>,
    raw_order_rate: Option<f64>,
    block_size: usize,
    tolerance: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let v = bench::check_bound(measured, sign_rate, raw_order_rate, block_size, tolerance).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("pass", v.pass)?;
    out.set_item("bound", v.bound)?;
    out.set_item("sign_bound", v.sign_bound)?;
    out.set_item("raw_order_rate", v.raw_order_rate)?;
    out.set_item(
        "regime",
        match v.regime {
            bench::Regime::Signing => "signing",
            bench::Regime::Protocol => "protocol",
        },
    )?;
    Ok(out)
}

/// Header signatures per second with `workers` threads.
#[pyfunction]
#[pyo3(signature = (workers = 1, block_size = 10, envelope_size = 40, duration_s = 0.5, seed = 1))]
fn sig_bench(
    py: Python<'_>,
    workers: usize,
    block_size: usize,
    envelope_size: usize,
    duration_s: f64,
    seed: u64,
) -> PyResult<f64> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(PyValueError::new_err("duration must be positive"));
    }
    let spec = bench::SigBenchSpec {
        workers,
        block_size,
        envelope_size,
        duration: Duration::from_secs_f64(duration_s),
        seed,
    };
    py.detach(|| bench::run_sig_bench(&spec))
        .map(|r| r.rate)
        .map_err(value_err)
}

/// ⌈(n+f+1)/2⌉
#[pyfunction]
fn classic_threshold(n: usize, f: usize) -> usize {
    consensus::classic_threshold(n, f)
}

#[pyfunction]
fn parse_mode(s: &str) -> PyResult<String> {
    s.parse::<Mode>().map(|m| m.to_string()).map_err(value_err)
}

#[pymodule]
fn bftorder_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Envelope>()?;
    m.add_class::<Block>()?;
    m.add_class::<KeyPair>()?;
    m.add_class::<Directory>()?;
    m.add_class::<Cluster>()?;
    m.add_class::<OrderingState>()?;
    m.add_function(wrap_pyfunction!(verify_chain, m)?)?;
    m.add_function(wrap_pyfunction!(sha256, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(check_bound, m)?)?;
    m.add_function(wrap_pyfunction!(sig_bench, m)?)?;
    m.add_function(wrap_pyfunction!(classic_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(parse_mode, m)?)?;
    Ok(())
}
