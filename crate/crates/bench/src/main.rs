// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Benchmark harness: `sig-bench`, `throughput`, `wan-latency` and
//! `check-bound`. Every subcommand prints a summary table and can write CSV
//! with one row per repetition plus summary rows.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use bftorder::bench::{
    check_bound, run_bound_sweep, run_sig_bench, run_throughput, run_wan_latency_mode, SigBenchSpec, ThroughputSpec,
    TransportKind, WanSpec, BLOCK_SIZES, DEFAULT_MODELED_SIGN_RATE, ENVELOPE_SIZES, RECEIVERS,
};
use bftorder::config::Deployment;
use bftorder::consensus::{ClusterConfig, Mode};
use bftorder::metrics::median;
use bftorder::transport::latency::LatencyMatrix;

#[derive(Parser)]
#[command(
    name = "bftorder-bench",
    version,
    about = "Benchmarks for the bftorder ordering service"
)]
struct Cli {
    /// Seed for key derivation, latency sampling and load.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Write results as CSV to this path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Deployment file supplying cluster parameters and node settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Header-signing rate per worker count.
    SigBench(SigArgs),
    /// Envelopes per second at node 0.
    Throughput(TpArgs),
    /// Submit-to-deliver latency per frontend site over a simulated WAN.
    WanLatency(WanArgs),
    /// Check measured throughput against min(sign_rate * block_size, raw_order_rate).
    CheckBound(BoundArgs),
}

#[derive(Args)]
struct SigArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    block_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,40,200,1024,4096")]
    envelope_size: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    duration_ms: u64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
}

#[derive(Args, Clone)]
struct ClusterArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    delta: Option<usize>,
    /// classic or wheat.
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Args, Clone)]
struct TpArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[arg(long, value_delimiter = ',', default_value = "40")]
    envelope_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    block_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    receivers: Vec<usize>,
    /// Virtual seconds for the simulator, wall-clock seconds for sockets.
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// sim or socket.
    #[arg(long, default_value = "sim")]
    transport: TransportKind,
    #[arg(long, default_value_t = 32)]
    clients: usize,
    #[arg(long, default_value_t = 16)]
    in_flight: usize,
    #[arg(long)]
    signing_workers: Option<usize>,
    /// Signatures per second of the node's signing pool (simulated cost).
    #[arg(long)]
    sign_rate: Option<f64>,
    /// Measure the signing rate with the real signer first and use it.
    #[arg(long)]
    calibrate: bool,
    /// No signing cost: consensus and dissemination only.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct WanArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100")]
    block_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "40")]
    envelope_size: Vec<usize>,
    #[arg(long, default_value_t = 20.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Latency matrix file; the built-in six-site matrix otherwise.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 100)]
    interval_ms: u64,
}

#[derive(Args)]
struct BoundArgs {
    /// Check a single measurement instead of running the sweep.
    #[arg(long)]
    measured: Option<f64>,
    #[arg(long)]
    raw_order_rate: Option<f64>,
    #[arg(long, default_value_t = 0.15)]
    tolerance: f64,
    #[command(flatten)]
    tp: TpArgs,
}

fn cluster_from(args: &ClusterArgs, dep: Option<&Deployment>) -> Result<ClusterConfig> {
    let mut c = match dep {
        Some(d) if args.n.is_none() && args.f.is_none() && args.delta.is_none() && args.mode.is_none() => {
            return Ok(d.cluster.clone());
        }
        Some(d) => d.cluster.clone(),
        None => ClusterConfig::classic(4, 1)?,
    };
    let f = args.f.unwrap_or(c.f);
    let mode = args.mode.unwrap_or(c.mode);
    let n = match (args.n, args.delta) {
        (Some(n), _) => n,
        (None, Some(d)) => 3 * f + 1 + d,
        (None, None) => c.n.max(3 * f + 1),
    };
    let batch = (c.batch_limit, c.batch_timeout, c.suspicion_timeout);
    c = match mode {
        Mode::Classic => ClusterConfig::classic(n, f)?,
        Mode::Wheat => ClusterConfig::wheat_default(f, n.checked_sub(3 * f + 1).context("n < 3f+1")?)?,
    };
    (c.batch_limit, c.batch_timeout, c.suspicion_timeout) = batch;
    Ok(c)
}

fn throughput_spec(cli: &Cli, args: &TpArgs, dep: Option<&Deployment>) -> Result<ThroughputSpec> {
    let cluster = cluster_from(&args.cluster, dep)?;
    let mut spec = ThroughputSpec::new(cluster, args.envelope_size[0], args.block_size[0], args.receivers[0]);
    spec.duration = Duration::from_secs_f64(args.duration_s);
    spec.repetitions = args.repetitions;
    spec.seed = cli.seed;
    spec.transport = args.transport;
    spec.clients = args.clients;
    spec.in_flight = args.in_flight;
    spec.signing_workers = args.signing_workers.or(dep.map(|d| d.signing_workers)).unwrap_or(1);
    if let Some(d) = dep {
        spec.flush_timeout = d.flush_timeout.min(spec.flush_timeout);
    }
    spec.sign_rate = match (args.sign_rate, args.calibrate) {
        (Some(r), _) => r,
        (None, true) => {
            let r = run_sig_bench(&SigBenchSpec {
                workers: spec.signing_workers,
                block_size: spec.block_size,
                envelope_size: spec.envelope_size,
                duration: Duration::from_secs(1),
                seed: cli.seed,
            })?;
            eprintln!("calibrated signing rate: {:.0}/s with {} workers", r.rate, r.workers);
            r.rate
        }
        (None, false) => DEFAULT_MODELED_SIGN_RATE * spec.signing_workers as f64,
    };
    spec.raw = args.raw;
    spec.validate()?;
    Ok(spec)
}

struct Output {
    csv: Option<csv::Writer<File>>,
}

impl Output {
    fn new(path: Option<&PathBuf>, header: &[&str]) -> Result<Self> {
        let csv = match path {
            Some(p) => {
                let mut w = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
                w.write_record(header)?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { csv })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        if let Some(w) = self.csv.as_mut() {
            w.write_record(fields)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.csv {
            w.flush()?;
        }
        Ok(())
    }
}

fn sig_bench(cli: &Cli, a: &SigArgs) -> Result<()> {
    let mut out = Output::new(
        cli.out.as_ref(),
        &[
            "row",
            "workers",
            "block_size",
            "envelope_size",
            "repetition",
            "signatures",
            "elapsed_s",
            "rate",
        ],
    )?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{:>8} {:>9} {:>12}", "workers", "envelope", "sigs/s")?;
    for &e in &a.envelope_size {
        for &w in &a.workers {
            let mut rates = Vec::new();
            for rep in 0..a.repetitions {
                let r = run_sig_bench(&SigBenchSpec {
                    workers: w,
                    block_size: a.block_size,
                    envelope_size: e,
                    duration: Duration::from_millis(a.duration_ms),
                    seed: cli.seed,
                })?;
                out.row(&[
                    "rep".into(),
                    w.to_string(),
                    a.block_size.to_string(),
                    e.to_string(),
                    rep.to_string(),
                    r.signatures.to_string(),
                    format!("{:.6}", r.elapsed.as_secs_f64()),
                    format!("{:.1}", r.rate),
                ])?;
                rates.push(r.rate);
            }
            let m = median(&rates);
            out.row(&[
                "summary".into(),
                w.to_string(),
                a.block_size.to_string(),
                e.to_string(),
                String::new(),
                String::new(),
                String::new(),
                format!("{m:.1}"),
            ])?;
            writeln!(stdout, "{w:>8} {e:>9} {m:>12.0}")?;
        }
    }
    out.finish()
}

fn throughput(cli: &Cli, a: &TpArgs, dep: Option<&Deployment>) -> Result<()> {
    let base = throughput_spec(cli, a, dep)?;
    let mut out = Output::new(
        cli.out.as_ref(),
        &[
            "row",
            "mode",
            "n",
            "envelope_size",
            "block_size",
            "receivers",
            "repetition",
            "seed",
            "envelopes",
            "blocks",
            "envelopes_per_s",
            "blocks_per_s",
        ],
    )?;
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "{:>9} {:>6} {:>9} {:>12} {:>10}",
        "envelope", "block", "receivers", "env/s", "blocks/s"
    )?;
    for &e in &a.envelope_size {
        for &b in &a.block_size {
            for &r in &a.receivers {
                let mut spec = base.clone();
                (spec.envelope_size, spec.block_size, spec.receivers) = (e, b, r);
                let report = run_throughput(&spec)?;
                let common = |row: &str| {
                    vec![
                        row.to_string(),
                        spec.cluster.mode.to_string(),
                        spec.cluster.n.to_string(),
                        e.to_string(),
                        b.to_string(),
                        r.to_string(),
                    ]
                };
                for run in &report.runs {
                    let mut f = common("rep");
                    f.extend([
                        run.repetition.to_string(),
                        run.seed.to_string(),
                        run.envelopes.to_string(),
                        run.blocks.to_string(),
                        format!("{:.3}", run.envelopes_per_sec),
                        format!("{:.3}", run.blocks_per_sec),
                    ]);
                    out.row(&f)?;
                }
                let mut f = common("summary");
                f.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("{:.3}", report.median_envelopes_per_sec),
                    format!("{:.3}", report.median_blocks_per_sec),
                ]);
                out.row(&f)?;
                writeln!(
                    stdout,
                    "{e:>9} {b:>6} {r:>9} {:>12.0} {:>10.1}",
                    report.median_envelopes_per_sec, report.median_blocks_per_sec
                )?;
            }
        }
    }
    out.finish()
}

fn wan_latency(cli: &Cli, a: &WanArgs, dep: Option<&Deployment>) -> Result<()> {
    let matrix = match &a.matrix {
        Some(p) => {
            LatencyMatrix::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => LatencyMatrix::wan_default(),
    };
    let mut out = Output::new(
        cli.out.as_ref(),
        &[
            "row",
            "mode",
            "block_size",
            "envelope_size",
            "frontend",
            "site",
            "repetition",
            "count",
            "p50_ms",
            "p90_ms",
            "p95_ms",
            "p99_ms",
        ],
    )?;
    let ms = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1000.0);
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "{:>8} {:>6} {:>9} {:>10} {:>9} {:>9} {:>9} {:>9}",
        "mode", "block", "envelope", "site", "p50", "p90", "p95", "p99"
    )?;
    for &b in &a.block_size {
        for &e in &a.envelope_size {
            for mode in [Mode::Classic, Mode::Wheat] {
                let mut per_site: Vec<Vec<[f64; 4]>> = Vec::new();
                let mut sites = Vec::new();
                for rep in 0..a.repetitions {
                    let mut spec = WanSpec::new(b, e, cli.seed.wrapping_add(rep as u64));
                    spec.matrix = matrix.clone();
                    spec.duration = Duration::from_secs_f64(a.duration_s);
                    spec.clients_per_frontend = a.clients;
                    spec.interval = Duration::from_millis(a.interval_ms);
                    if let Some(d) = dep {
                        spec.flush_timeout = d.flush_timeout;
                    }
                    let res = run_wan_latency_mode(&spec, mode)?;
                    if per_site.is_empty() {
                        per_site = vec![Vec::new(); res.len()];
                        sites = res.iter().map(|s| (s.frontend, s.site.clone())).collect();
                    }
                    for (i, s) in res.iter().enumerate() {
                        let p = s.percentiles;
                        out.row(&[
                            "rep".into(),
                            mode.to_string(),
                            b.to_string(),
                            e.to_string(),
                            s.frontend.to_string(),
                            s.site.clone(),
                            rep.to_string(),
                            p.count.to_string(),
                            ms(p.p50),
                            ms(p.p90),
                            ms(p.p95),
                            ms(p.p99),
                        ])?;
                        per_site[i].push([p.p50, p.p90, p.p95, p.p99].map(|d| d.as_secs_f64() * 1000.0));
                    }
                }
                for (i, (fe, site)) in sites.iter().enumerate() {
                    let m: Vec<f64> = (0..4)
                        .map(|q| median(&per_site[i].iter().map(|v| v[q]).collect::<Vec<_>>()))
                        .collect();
                    out.row(&[
                        "summary".into(),
                        mode.to_string(),
                        b.to_string(),
                        e.to_string(),
                        fe.to_string(),
                        site.clone(),
                        String::new(),
                        String::new(),
                        format!("{:.3}", m[0]),
                        format!("{:.3}", m[1]),
                        format!("{:.3}", m[2]),
                        format!("{:.3}", m[3]),
                    ])?;
                    writeln!(
                        stdout,
                        "{:>8} {b:>6} {e:>9} {site:>10} {:>9.1} {:>9.1} {:>9.1} {:>9.1}",
                        mode.to_string(),
                        m[0],
                        m[1],
                        m[2],
                        m[3]
                    )?;
                }
            }
        }
    }
    out.finish()
}

fn bound(cli: &Cli, a: &BoundArgs, dep: Option<&Deployment>) -> Result<()> {
    let header = [
        "row",
        "envelope_size",
        "block_size",
        "receivers",
        "measured",
        "sign_bound",
        "halved_sign_bound",
        "raw_order_rate",
        "bound",
        "regime",
        "verdict",
    ];
    let mut out = Output::new(cli.out.as_ref(), &header)?;
    let mut stdout = io::stdout().lock();
    let fmt = |v: &bftorder::bench::BoundVerdict| {
        (
            format!("{:.3}", v.measured),
            format!("{:.3}", v.sign_bound),
            format!("{:.3}", v.halved_sign_bound),
            format!("{:.3}", v.raw_order_rate),
            format!("{:.3}", v.bound),
            format!("{:?}", v.regime).to_lowercase(),
            if v.pass { "PASS" } else { "FAIL" }.to_string(),
        )
    };
    if let Some(measured) = a.measured {
        let block = a.tp.block_size[0];
        let v = check_bound(measured, a.tp.sign_rate, a.raw_order_rate, block, a.tolerance)?;
        let (m, s, h, r, bd, reg, verdict) = fmt(&v);
        out.row(&[
            "point".into(),
            String::new(),
            block.to_string(),
            String::new(),
            m,
            s,
            h,
            r,
            bd,
            reg,
            verdict.clone(),
        ])?;
        writeln!(
            stdout,
            "measured {measured:.1} bound {:.1} ({:?}) -> {verdict}",
            v.bound, v.regime
        )?;
        out.finish()?;
        if !v.pass {
            bail!("bound violated");
        }
        return Ok(());
    }
    if a.raw_order_rate.is_some() {
        bail!("--raw-order-rate only applies with --measured");
    }
    let mut tp = a.tp.clone();
    if tp.envelope_size == [40] && tp.block_size == [10] && tp.receivers == [1] {
        tp.envelope_size = ENVELOPE_SIZES.to_vec();
        tp.block_size = BLOCK_SIZES.to_vec();
        tp.receivers = RECEIVERS.to_vec();
    }
    let base = throughput_spec(cli, &tp, dep)?;
    let points = run_bound_sweep(&base, &tp.envelope_size, &tp.block_size, &tp.receivers, a.tolerance)?;
    writeln!(
        stdout,
        "{:>9} {:>6} {:>9} {:>12} {:>12} {:>9} {:>8}",
        "envelope", "block", "receivers", "measured", "bound", "regime", "verdict"
    )?;
    let mut failures = 0;
    for p in &points {
        let (m, s, h, r, bd, reg, verdict) = fmt(&p.verdict);
        out.row(&[
            "point".into(),
            p.envelope_size.to_string(),
            p.block_size.to_string(),
            p.receivers.to_string(),
            m,
            s,
            h,
            r,
            bd,
            reg.clone(),
            verdict.clone(),
        ])?;
        writeln!(
            stdout,
            "{:>9} {:>6} {:>9} {:>12.0} {:>12.0} {reg:>9} {verdict:>8}",
            p.envelope_size, p.block_size, p.receivers, p.verdict.measured, p.verdict.bound
        )?;
        failures += usize::from(!p.verdict.pass);
    }
    let summary = if failures == 0 { "PASS" } else { "FAIL" };
    out.row(&[
        "summary".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        summary.into(),
    ])?;
    out.finish()?;
    writeln!(stdout, "{} configurations, {failures} violations", points.len())?;
    if failures > 0 {
        bail!("{failures} configurations exceed the bound");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let dep = cli
        .config
        .as_ref()
        .map(|p| Deployment::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    match &cli.cmd {
        Cmd::SigBench(a) => sig_bench(&cli, a),
        Cmd::Throughput(a) => throughput(&cli, a, dep.as_ref()),
        Cmd::WanLatency(a) => wan_latency(&cli, a, dep.as_ref()),
        Cmd::CheckBound(a) => bound(&cli, a, dep.as_ref()),
    }
}
