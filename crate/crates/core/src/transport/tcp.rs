// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

//! Stream-socket transport.
//!
//! Every endpoint listens on its own address and dials every peer it sends
//! to, so each direction of a link is one TCP connection and per-link FIFO
//! follows from the stream. The first frame on a connection is a HELLO
//! naming the dialing endpoint. Frames are a 4-byte big-endian length
//! followed by the payload.
//!
//! Threads per endpoint: an acceptor, one reader per inbound connection,
//! one writer per peer (reconnecting with back-off), a pool of offload
//! workers, and the event loop that owns the actor.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use log::{debug, warn};

use super::{Actor, Context, EndpointId, Job};
use crate::consensus::{Body, ProtocolMessage};
use crate::error::TransportError;

pub const DEFAULT_MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone)]
pub struct TcpOptions {
    pub listen: SocketAddr,
    /// Addresses of every endpoint this one may send to.
    pub peers: BTreeMap<EndpointId, SocketAddr>,
    pub max_frame: usize,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
    /// Frames queued for an unreachable peer beyond this are dropped.
    pub max_queue: usize,
}

impl TcpOptions {
    pub fn new(listen: SocketAddr, peers: BTreeMap<EndpointId, SocketAddr>) -> Self {
        Self {
            listen,
            peers,
            max_frame: DEFAULT_MAX_FRAME,
            backoff_min: Duration::from_millis(10),
            backoff_max: Duration::from_secs(1),
            max_queue: 1 << 16,
        }
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len =
        u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read, max: usize) -> Result<Option<Vec<u8>>, TransportError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(TransportError::Frame(format!("length {len} exceeds {max}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn hello(ep: EndpointId) -> Bytes {
    ProtocolMessage::new(0, 0, ep, Body::Hello).encode()
}

enum Event {
    Message(EndpointId, Bytes),
    Offload(u64, Vec<u8>),
}

#[derive(Debug, Default)]
pub struct TcpStats {
    pub frames_in: AtomicU64,
    pub frames_out: AtomicU64,
    pub dropped_out: AtomicU64,
    pub reconnects: AtomicU64,
    pub rejected: AtomicU64,
}

struct Shared {
    ep: EndpointId,
    stop: AtomicBool,
    quarantined: Mutex<BTreeSet<EndpointId>>,
    inbound: Mutex<Vec<TcpStream>>,
    stats: TcpStats,
    opts: TcpOptions,
}

impl Shared {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

/// A running endpoint. Dropping it stops every thread.
pub struct TcpHandle {
    shared: Arc<Shared>,
    actor: Arc<Mutex<Box<dyn Actor>>>,
    local: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl TcpHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn endpoint(&self) -> EndpointId {
        self.shared.ep
    }

    /// Locks the actor; the event loop waits while the guard is held.
    pub fn actor(&self) -> MutexGuard<'_, Box<dyn Actor>> {
        lock(&self.actor)
    }

    pub fn with_actor<T: 'static, R>(&self, f: impl FnOnce(&T) -> R) -> Option<R> {
        let guard = self.actor();
        guard.as_any().downcast_ref::<T>().map(f)
    }

    pub fn with_actor_mut<T: 'static, R>(&self, f: impl FnOnce(&mut T) -> R) -> Option<R> {
        let mut guard = self.actor();
        guard.as_any_mut().downcast_mut::<T>().map(f)
    }

    pub fn quarantined(&self) -> BTreeSet<EndpointId> {
        self.shared.quarantined.lock().expect("not poisoned").clone()
    }

    pub fn stats(&self) -> &TcpStats {
        &self.shared.stats
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in self.shared.inbound.lock().expect("not poisoned").drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TcpHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds the listener and starts every thread of an endpoint.
pub fn spawn(actor: Box<dyn Actor>, opts: TcpOptions) -> Result<TcpHandle, TransportError> {
    let listener = TcpListener::bind(opts.listen)?;
    listener.set_nonblocking(true)?;
    spawn_on(listener, actor, opts)
}

/// As [`spawn`] with an already bound listener.
pub fn spawn_on(listener: TcpListener, actor: Box<dyn Actor>, opts: TcpOptions) -> Result<TcpHandle, TransportError> {
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let ep = actor.endpoint();
    let workers = actor.workers().max(1);
    let shared = Arc::new(Shared {
        ep,
        stop: AtomicBool::new(false),
        quarantined: Mutex::new(BTreeSet::new()),
        inbound: Mutex::new(Vec::new()),
        stats: TcpStats::default(),
        opts,
    });
    let (events_tx, events_rx) = mpsc::channel::<Event>();
    let mut threads = Vec::new();

    {
        let shared = shared.clone();
        let events = events_tx.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("accept-{ep}"))
                .spawn(move || accept_loop(listener, shared, events))?,
        );
    }

    let mut writers = HashMap::new();
    for (&peer, &addr) in &shared.opts.peers {
        if peer == ep {
            continue;
        }
        let (tx, rx) = mpsc::channel::<Bytes>();
        let depth = Arc::new(AtomicU64::new(0));
        let s = shared.clone();
        let d = depth.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("write-{ep}-{peer}"))
                .spawn(move || writer_loop(peer, addr, rx, d, s))?,
        );
        writers.insert(peer, (tx, depth));
    }

    let (jobs_tx, jobs_rx) = mpsc::channel::<(u64, Job)>();
    let jobs_rx = Arc::new(Mutex::new(jobs_rx));
    for w in 0..workers {
        let rx = jobs_rx.clone();
        let events = events_tx.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("work-{ep}-{w}"))
                .spawn(move || loop {
                    let next = rx.lock().expect("not poisoned").recv();
                    match next {
                        Ok((tag, job)) => {
                            if events.send(Event::Offload(tag, job())).is_err() {
                                return;
                            }
                        }
                        Err(_) => return,
                    }
                })?,
        );
    }
    drop(events_tx);

    let actor = Arc::new(Mutex::new(actor));
    {
        let actor = actor.clone();
        let shared = shared.clone();
        threads.push(thread::Builder::new().name(format!("loop-{ep}")).spawn(move || {
            let ctx = TcpContext {
                start: Instant::now(),
                writers,
                timers: BinaryHeap::new(),
                jobs: jobs_tx,
                shared: shared.clone(),
                seq: 0,
            };
            event_loop(actor, ctx, events_rx, shared)
        })?);
    }
    Ok(TcpHandle {
        shared,
        actor,
        local,
        threads,
    })
}

struct TcpContext {
    start: Instant,
    writers: HashMap<EndpointId, (Sender<Bytes>, Arc<AtomicU64>)>,
    timers: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    jobs: Sender<(u64, Job)>,
    shared: Arc<Shared>,
    seq: u64,
}

impl Context for TcpContext {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn send(&mut self, to: EndpointId, bytes: Bytes) -> Result<(), TransportError> {
        let (tx, depth) = self.writers.get(&to).ok_or(TransportError::UnknownEndpoint(to))?;
        if depth.load(Ordering::Relaxed) as usize >= self.shared.opts.max_queue {
            self.shared.stats.dropped_out.fetch_add(1, Ordering::Relaxed);
            return Err(TransportError::Unreachable(to));
        }
        depth.fetch_add(1, Ordering::Relaxed);
        tx.send(bytes).map_err(|_| TransportError::Unreachable(to))
    }

    fn set_timer(&mut self, after: Duration, token: u64) {
        self.seq += 1;
        self.timers.push(Reverse((Instant::now() + after, self.seq, token)));
    }

    fn offload(&mut self, job: Job, _cost: Duration, tag: u64) {
        let _ = self.jobs.send((tag, job));
    }
}

fn lock(a: &Mutex<Box<dyn Actor>>) -> MutexGuard<'_, Box<dyn Actor>> {
    a.lock().unwrap_or_else(|p| p.into_inner())
}

fn event_loop(actor: Arc<Mutex<Box<dyn Actor>>>, mut ctx: TcpContext, events: Receiver<Event>, shared: Arc<Shared>) {
    lock(&actor).on_start(&mut ctx);
    const TICK: Duration = Duration::from_millis(20);
    while !shared.stopped() {
        let now = Instant::now();
        while let Some(Reverse((at, _, token))) = ctx.timers.peek().copied() {
            if at > now {
                break;
            }
            ctx.timers.pop();
            lock(&actor).on_timer(&mut ctx, token);
        }
        let wait = ctx
            .timers
            .peek()
            .map(|Reverse((at, _, _))| at.saturating_duration_since(now))
            .unwrap_or(TICK)
            .min(TICK);
        match events.recv_timeout(wait) {
            Ok(Event::Message(from, bytes)) => lock(&actor).on_message(&mut ctx, from, bytes),
            Ok(Event::Offload(tag, result)) => lock(&actor).on_offload_done(&mut ctx, tag, result),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, events: Sender<Event>) {
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopped() {
        match listener.accept() {
            Ok((stream, addr)) => {
                debug!("{} accepted {addr}", shared.ep);
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    shared.inbound.lock().expect("not poisoned").push(c);
                }
                let s = shared.clone();
                let ev = events.clone();
                match thread::Builder::new()
                    .name(format!("read-{}", shared.ep))
                    .spawn(move || reader(stream, s, ev))
                {
                    Ok(h) => readers.push(h),
                    Err(e) => warn!("cannot spawn reader: {e}"),
                }
                readers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("{} accept failed: {e}", shared.ep);
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
    for s in shared.inbound.lock().expect("not poisoned").drain(..) {
        let _ = s.shutdown(Shutdown::Both);
    }
    for h in readers {
        let _ = h.join();
    }
}

fn reader(stream: TcpStream, shared: Arc<Shared>, events: Sender<Event>) {
    let max = shared.opts.max_frame;
    let mut r = BufReader::new(&stream);
    let peer = match read_frame(&mut r, max) {
        Ok(Some(f)) => match ProtocolMessage::decode(&f) {
            Ok(m) if matches!(m.body, Body::Hello) => m.sender,
            _ => {
                shared.stats.rejected.fetch_add(1, Ordering::Relaxed);
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        },
        _ => {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    };
    if shared.quarantined.lock().expect("not poisoned").contains(&peer) {
        shared.stats.rejected.fetch_add(1, Ordering::Relaxed);
        let _ = stream.shutdown(Shutdown::Both);
        return;
    }
    loop {
        match read_frame(&mut r, max) {
            Ok(Some(f)) => {
                shared.stats.frames_in.fetch_add(1, Ordering::Relaxed);
                if events.send(Event::Message(peer, Bytes::from(f))).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(TransportError::Frame(reason)) => {
                warn!("{}: quarantining {peer}: {reason}", shared.ep);
                shared.quarantined.lock().expect("not poisoned").insert(peer);
                break;
            }
            Err(_) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn writer_loop(peer: EndpointId, addr: SocketAddr, rx: Receiver<Bytes>, depth: Arc<AtomicU64>, shared: Arc<Shared>) {
    let mut conn: Option<BufWriter<TcpStream>> = None;
    let mut backoff = shared.opts.backoff_min;
    let mut pending: Option<Bytes> = None;
    loop {
        if shared.stopped() {
            break;
        }
        let frame = match pending.take() {
            Some(f) => f,
            None => match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(f) => {
                    depth.fetch_sub(1, Ordering::Relaxed);
                    f
                }
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(c) = conn.as_mut() {
                        if c.flush().is_err() {
                            conn = None;
                        }
                    }
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => break,
            },
        };
        if conn.is_none() {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    let mut w = BufWriter::new(s);
                    if write_frame(&mut w, &hello(shared.ep)).is_ok() {
                        conn = Some(w);
                        backoff = shared.opts.backoff_min;
                        shared.stats.reconnects.fetch_add(1, Ordering::Relaxed);
                    }
                }
                Err(e) => debug!("{} -> {peer}: connect failed: {e}", shared.ep),
            }
        }
        let Some(w) = conn.as_mut() else {
            pending = Some(frame);
            sleep_unless_stopped(&shared, backoff);
            backoff = (backoff * 2).min(shared.opts.backoff_max);
            continue;
        };
        let more_queued = depth.load(Ordering::Relaxed) > 0;
        let res = write_frame(w, &frame).and_then(|_| if more_queued { Ok(()) } else { w.flush() });
        match res {
            Ok(()) => {
                shared.stats.frames_out.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                debug!("{} -> {peer}: write failed: {e}", shared.ep);
                conn = None;
                pending = Some(frame);
            }
        }
    }
    if let Some(mut w) = conn {
        let _ = w.flush();
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }
}

fn sleep_unless_stopped(shared: &Shared, d: Duration) {
    let until = Instant::now() + d;
    while !shared.stopped() {
        let left = until.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        thread::sleep(left.min(Duration::from_millis(20)));
    }
}
