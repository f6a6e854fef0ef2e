// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Experiments: header-signing microbenchmark, throughput sweeps, the
//! throughput bound check and WAN latency.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::consensus::{ClusterConfig, Mode};
use crate::crypto::KeyPair;
use crate::error::BenchError;
use crate::frontend::{FrontendActor, LoadSpec};
use crate::metrics::{median, Percentiles};
use crate::node::{cutter::NodeState, OrderingNode};
use crate::scenario::{build_actors, Scenario, ScenarioSpec};
use crate::transport::latency::LatencyMatrix;
use crate::transport::tcp::{spawn_on, TcpOptions};
use crate::transport::{frontend_endpoint, Actor, CostModel, EndpointId};
use crate::types::Envelope;

/// Envelope sizes of the default sweep, in bytes.
pub const ENVELOPE_SIZES: [usize; 4] = [40, 200, 1024, 4096];
pub const BLOCK_SIZES: [usize; 2] = [10, 100];
pub const RECEIVERS: [usize; 6] = [1, 2, 4, 8, 16, 32];
/// Modeled signatures per second per worker when no calibration is given.
pub const DEFAULT_MODELED_SIGN_RATE: f64 = 1000.0;
pub const WARMUP_FRACTION: f64 = 0.1;

// ---------------------------------------------------------------- signing

#[derive(Debug, Clone)]
pub struct SigBenchSpec {
    pub workers: usize,
    pub block_size: usize,
    pub envelope_size: usize,
    pub duration: Duration,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigBenchResult {
    pub workers: usize,
    pub block_size: usize,
    pub envelope_size: usize,
    pub signatures: u64,
    pub elapsed: Duration,
    pub rate: f64,
}

/// Headers of a chain of `count` blocks of `block_size` envelopes.
fn sample_headers(count: usize, block_size: usize, envelope_size: usize) -> Vec<[u8; crate::types::HEADER_LEN]> {
    let mut state = NodeState::default();
    (0..count)
        .map(|b| {
            let envs: Vec<Envelope> = (0..block_size)
                .map(|i| {
                    let seq = (b * block_size + i) as u64;
                    Envelope::new("ch0", 1, seq, crate::frontend::payload(1, seq, envelope_size))
                })
                .collect();
            state.cut_block(&envs).to_bytes()
        })
        .collect()
}

/// Signs block headers with `workers` threads for `duration`. Blocks are
/// built beforehand; only header signing is timed.
pub fn run_sig_bench(spec: &SigBenchSpec) -> Result<SigBenchResult, BenchError> {
    if spec.workers == 0 || spec.block_size == 0 {
        return Err(BenchError::Invalid("workers and block_size must be positive".into()));
    }
    let headers = Arc::new(sample_headers(64, spec.block_size, spec.envelope_size));
    let key = Arc::new(KeyPair::derive(spec.seed, 0));
    let stop = Arc::new(AtomicBool::new(false));
    let count = Arc::new(AtomicU64::new(0));
    let start = Instant::now();
    let handles: Vec<_> = (0..spec.workers)
        .map(|w| {
            let (headers, key, stop, count) = (headers.clone(), key.clone(), stop.clone(), count.clone());
            thread::spawn(move || {
                let mut i = w;
                let mut local = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    std::hint::black_box(key.sign(&headers[i % headers.len()]));
                    i += 1;
                    local += 1;
                }
                count.fetch_add(local, Ordering::Relaxed);
            })
        })
        .collect();
    thread::sleep(spec.duration);
    stop.store(true, Ordering::Relaxed);
    for h in handles {
        h.join()
            .map_err(|_| BenchError::Invalid("signing worker panicked".into()))?;
    }
    let elapsed = start.elapsed();
    let signatures = count.load(Ordering::Relaxed);
    Ok(SigBenchResult {
        workers: spec.workers,
        block_size: spec.block_size,
        envelope_size: spec.envelope_size,
        signatures,
        elapsed,
        rate: signatures as f64 / elapsed.as_secs_f64(),
    })
}

// ---------------------------------------------------------------- throughput

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Socket,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Self::Sim),
            "socket" => Ok(Self::Socket),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThroughputSpec {
    pub cluster: ClusterConfig,
    pub envelope_size: usize,
    pub block_size: usize,
    /// Frontends registered with every node; frontend 0 also runs the clients.
    pub receivers: usize,
    pub clients: usize,
    pub in_flight: usize,
    pub duration: Duration,
    pub repetitions: usize,
    pub seed: u64,
    pub transport: TransportKind,
    pub signing_workers: usize,
    /// Signatures per second of the whole worker pool. Sets the simulated
    /// signing cost; ignored by the socket transport.
    pub sign_rate: f64,
    /// Disable signing cost (consensus and dissemination only).
    pub raw: bool,
    pub costs: CostModel,
    pub latency: LatencyMatrix,
    pub flush_timeout: Duration,
}

impl ThroughputSpec {
    pub fn new(cluster: ClusterConfig, envelope_size: usize, block_size: usize, receivers: usize) -> Self {
        Self {
            cluster,
            envelope_size,
            block_size,
            receivers,
            clients: 32,
            in_flight: 16,
            duration: Duration::from_secs(10),
            repetitions: 3,
            seed: 1,
            transport: TransportKind::Sim,
            signing_workers: 1,
            sign_rate: DEFAULT_MODELED_SIGN_RATE,
            raw: false,
            costs: CostModel::lan(),
            latency: LatencyMatrix::uniform(0.1, 0.02),
            flush_timeout: Duration::from_millis(100),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.cluster.validate()?;
        if self.block_size == 0 || self.receivers == 0 || self.clients == 0 || self.in_flight == 0 {
            return Err(BenchError::Invalid(
                "block_size, receivers, clients and in_flight must be positive".into(),
            ));
        }
        if self.repetitions == 0 || self.duration.is_zero() {
            return Err(BenchError::Invalid(
                "need at least one repetition of positive duration".into(),
            ));
        }
        if self.signing_workers == 0 || self.sign_rate <= 0.0 || !self.sign_rate.is_finite() {
            return Err(BenchError::Invalid(
                "signing workers and sign rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sign_cost(&self) -> Duration {
        if self.raw {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(self.signing_workers as f64 / self.sign_rate)
        }
    }

    fn scenario(&self, seed: u64) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(self.cluster.clone(), self.receivers, seed);
        s.block_size = self.block_size;
        s.flush_timeout = self.flush_timeout;
        s.signing_workers = self.signing_workers;
        s.sign_cost = self.sign_cost();
        s.modeled_signatures = self.transport == TransportKind::Sim;
        s.record = false;
        s.retain_blocks = false;
        s.loads
            .push((0, LoadSpec::closed(self.clients, self.in_flight, self.envelope_size)));
        s.sim.costs = self.costs.clone();
        s.sim.latency = self.latency.clone();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRun {
    pub repetition: usize,
    pub seed: u64,
    pub envelopes_per_sec: f64,
    pub blocks_per_sec: f64,
    pub envelopes: u64,
    pub blocks: u64,
    pub window: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub runs: Vec<ThroughputRun>,
    pub median_envelopes_per_sec: f64,
    pub median_blocks_per_sec: f64,
}

/// Rates from node 0's emission log over `[warmup, end)`.
pub fn measure(emit_log: &[(Duration, u32)], warmup: Duration, end: Duration) -> (u64, u64, Duration) {
    let window = end.saturating_sub(warmup);
    let mut envelopes = 0u64;
    let mut blocks = 0u64;
    for (t, n) in emit_log {
        if *t >= warmup && *t < end {
            envelopes += *n as u64;
            blocks += 1;
        }
    }
    (envelopes, blocks, window)
}

fn run_once(spec: &ThroughputSpec, rep: usize) -> Result<ThroughputRun, BenchError> {
    let seed = spec.seed.wrapping_add(rep as u64);
    let warmup = spec.duration.mul_f64(WARMUP_FRACTION);
    let log = match spec.transport {
        TransportKind::Sim => {
            let mut sc = Scenario::build(spec.scenario(seed));
            sc.sim.run_for(spec.duration);
            sc.node(0).record().emit_log.clone()
        }
        TransportKind::Socket => run_socket(spec, seed)?,
    };
    let (envelopes, blocks, window) = measure(&log, warmup, spec.duration);
    if blocks == 0 {
        return Err(BenchError::NoProgress);
    }
    Ok(ThroughputRun {
        repetition: rep,
        seed,
        envelopes_per_sec: envelopes as f64 / window.as_secs_f64(),
        blocks_per_sec: blocks as f64 / window.as_secs_f64(),
        envelopes,
        blocks,
        window,
    })
}

fn run_socket(spec: &ThroughputSpec, seed: u64) -> Result<Vec<(Duration, u32)>, BenchError> {
    let actors = build_actors(&spec.scenario(seed));
    let mut eps: Vec<EndpointId> = actors.nodes.iter().map(|n| n.id()).collect();
    eps.extend((0..spec.receivers).map(frontend_endpoint));
    let mut listeners = Vec::new();
    let mut addrs: BTreeMap<EndpointId, SocketAddr> = BTreeMap::new();
    for ep in &eps {
        let l = TcpListener::bind("127.0.0.1:0")?;
        addrs.insert(*ep, l.local_addr()?);
        listeners.push(l);
    }
    let boxed = actors
        .nodes
        .into_iter()
        .map(|n| Box::new(n) as Box<dyn Actor>)
        .chain(actors.frontends.into_iter().map(|f| Box::new(f) as Box<dyn Actor>));
    let mut handles = Vec::new();
    for (actor, l) in boxed.zip(listeners) {
        let opts = TcpOptions::new(l.local_addr()?, addrs.clone());
        handles.push(spawn_on(l, actor, opts)?);
    }
    thread::sleep(spec.duration);
    let log = handles[0]
        .with_actor::<OrderingNode, _>(|n| n.record().emit_log.clone())
        .unwrap_or_default();
    drop(handles);
    Ok(log)
}

pub fn run_throughput(spec: &ThroughputSpec) -> Result<ThroughputReport, BenchError> {
    spec.validate()?;
    let runs = (0..spec.repetitions)
        .map(|r| run_once(spec, r))
        .collect::<Result<Vec<_>, _>>()?;
    let eps: Vec<f64> = runs.iter().map(|r| r.envelopes_per_sec).collect();
    let bps: Vec<f64> = runs.iter().map(|r| r.blocks_per_sec).collect();
    Ok(ThroughputReport {
        median_envelopes_per_sec: median(&eps),
        median_blocks_per_sec: median(&bps),
        runs,
    })
}

// ---------------------------------------------------------------- bound

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Signing,
    Protocol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundVerdict {
    pub measured: f64,
    pub sign_bound: f64,
    /// Signing bound if every block carried two signatures.
    pub halved_sign_bound: f64,
    pub raw_order_rate: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub regime: Regime,
    pub pass: bool,
}

/// Checks `measured <= min(sign_rate * block_size, raw_order_rate) * (1 + tolerance)`.
pub fn check_bound(
    measured: f64,
    sign_rate: Option<f64>,
    raw_order_rate: Option<f64>,
    block_size: usize,
    tolerance: f64,
) -> Result<BoundVerdict, BenchError> {
    let sign_rate = sign_rate.ok_or(BenchError::MissingCalibration("sign_rate"))?;
    let raw = raw_order_rate.ok_or(BenchError::MissingCalibration("raw_order_rate"))?;
    if !(measured >= 0.0 && sign_rate > 0.0 && raw > 0.0 && tolerance >= 0.0 && block_size > 0) {
        return Err(BenchError::Invalid("bound inputs must be positive".into()));
    }
    let sign_bound = sign_rate * block_size as f64;
    let (bound, regime) = if sign_bound <= raw {
        (sign_bound, Regime::Signing)
    } else {
        (raw, Regime::Protocol)
    };
    Ok(BoundVerdict {
        measured,
        sign_bound,
        halved_sign_bound: sign_bound / 2.0,
        raw_order_rate: raw,
        bound,
        tolerance,
        regime,
        pass: measured <= bound * (1.0 + tolerance),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub envelope_size: usize,
    pub block_size: usize,
    pub receivers: usize,
    pub measured: ThroughputReport,
    pub raw: ThroughputReport,
    pub verdict: BoundVerdict,
}

/// Runs `base` over every combination, each with a matching raw run, and
/// checks the bound on the medians.
pub fn run_bound_sweep(
    base: &ThroughputSpec,
    envelope_sizes: &[usize],
    block_sizes: &[usize],
    receivers: &[usize],
    tolerance: f64,
) -> Result<Vec<SweepPoint>, BenchError> {
    let mut out = Vec::new();
    for &e in envelope_sizes {
        for &b in block_sizes {
            for &r in receivers {
                let mut spec = base.clone();
                spec.envelope_size = e;
                spec.block_size = b;
                spec.receivers = r;
                spec.raw = false;
                let measured = run_throughput(&spec)?;
                spec.raw = true;
                let raw = run_throughput(&spec)?;
                let verdict = check_bound(
                    measured.median_envelopes_per_sec,
                    Some(base.sign_rate),
                    Some(raw.median_envelopes_per_sec),
                    b,
                    tolerance,
                )?;
                out.push(SweepPoint {
                    envelope_size: e,
                    block_size: b,
                    receivers: r,
                    measured,
                    raw,
                    verdict,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- WAN latency

#[derive(Debug, Clone)]
pub struct WanSpec {
    pub block_size: usize,
    pub envelope_size: usize,
    pub duration: Duration,
    pub seed: u64,
    pub matrix: LatencyMatrix,
    pub frontends: usize,
    pub clients_per_frontend: usize,
    /// Each client submits one envelope per interval.
    pub interval: Duration,
    pub in_flight: usize,
    pub suspicion_timeout: Duration,
    pub flush_timeout: Duration,
    /// Replicas given the larger vote weight in the weighted configuration.
    pub wheat_vmax: Vec<u16>,
}

impl WanSpec {
    pub fn new(block_size: usize, envelope_size: usize, seed: u64) -> Self {
        Self {
            block_size,
            envelope_size,
            duration: Duration::from_secs(20),
            seed,
            matrix: LatencyMatrix::wan_default(),
            frontends: 4,
            clients_per_frontend: 10,
            interval: Duration::from_millis(100),
            in_flight: 50,
            suspicion_timeout: Duration::from_secs(2),
            flush_timeout: Duration::from_secs(1),
            wheat_vmax: vec![0, 4],
        }
    }

    pub fn cluster(&self, mode: Mode) -> Result<ClusterConfig, BenchError> {
        let mut c = match mode {
            Mode::Classic => ClusterConfig::classic(4, 1)?,
            Mode::Wheat => ClusterConfig::wheat(1, 1, &self.wheat_vmax)?,
        };
        c.suspicion_timeout = self.suspicion_timeout;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteLatency {
    pub mode: Mode,
    pub frontend: usize,
    pub site: String,
    pub block_size: usize,
    pub envelope_size: usize,
    pub percentiles: Percentiles,
}

pub fn run_wan_latency_mode(spec: &WanSpec, mode: Mode) -> Result<Vec<SiteLatency>, BenchError> {
    let cluster = spec.cluster(mode)?;
    let mut s = ScenarioSpec::new(cluster, spec.frontends, spec.seed);
    s.block_size = spec.block_size;
    s.flush_timeout = spec.flush_timeout;
    s.record = false;
    s.retain_blocks = false;
    s.sim.latency = spec.matrix.clone();
    s.sim.costs = CostModel::lan();
    for k in 0..spec.frontends {
        let mut load = LoadSpec::closed(spec.clients_per_frontend, spec.in_flight, spec.envelope_size);
        load.interval = Some(spec.interval);
        // Stagger clients so arrivals interleave.
        load.start = spec.interval.mul_f64(k as f64 / spec.frontends as f64);
        s.loads.push((k, load));
    }
    let mut sc = Scenario::build(s);
    sc.sim.run_for(spec.duration);
    let warmup = spec.duration.mul_f64(WARMUP_FRACTION);
    let mut out = Vec::new();
    for k in 0..spec.frontends {
        let ep = frontend_endpoint(k);
        let fe: &FrontendActor = sc.sim.actor(ep).expect("frontend exists");
        let p = Percentiles::of(fe.latencies().iter().filter(|(t, _)| *t >= warmup).map(|(_, l)| *l))
            .ok_or(BenchError::NoProgress)?;
        out.push(SiteLatency {
            mode,
            frontend: k,
            site: spec.matrix.site_of(ep).unwrap_or("?").to_string(),
            block_size: spec.block_size,
            envelope_size: spec.envelope_size,
            percentiles: p,
        });
    }
    Ok(out)
}

/// Classic then weighted results for every frontend.
pub fn run_wan_latency(spec: &WanSpec) -> Result<Vec<SiteLatency>, BenchError> {
    let mut out = run_wan_latency_mode(spec, Mode::Classic)?;
    out.extend(run_wan_latency_mode(spec, Mode::Wheat)?);
    Ok(out)
}
