//! Run-to-completion threading: one acceptor thread plus N workers, each
//! worker handling its connections start to finish on its own event loop —
//! read, decode, decide, encode, write, with zero per-packet thread
//! crossings.
//!
//! The acceptor owns the listener and runs the (cheap, once-per-connection)
//! OpenFlow handshake, because the handshake is what reveals the datapath
//! id, and the datapath id decides which worker owns the connection:
//! `dpid mod worker_count`. That same assignment is what lets a worker hold
//! a private, lock-free table shard — connection owner and shard owner
//! coincide by construction. The one-time connection transfer is an
//! ownership move, not a per-packet handoff, and is not counted as one.

use std::sync::atomic::Ordering::Relaxed;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mio::{Events, Interest, Poll, Token, Waker};
use slab::Slab;

use crate::bufferpool::BufferPool;
use crate::learnswitch::{shard_owner, Shard, SharedTable, TableView};

use super::conn::{drive_handshake, drive_inline, Conn, DriveOutcome, InlineCtx};
use super::counters::AllocStatsSync;
use super::{affinity, EngineShared, SpawnedThreads, ThreadFinal};

const LISTENER: Token = Token(usize::MAX - 1);
const WAKER: Token = Token(usize::MAX - 2);
const POLL_TICK: Duration = Duration::from_millis(100);

/// Either strategy's table, as owned by one worker.
enum WorkerTable {
    Shared(Arc<SharedTable>),
    Shard(Shard),
}

impl WorkerTable {
    fn view(&mut self) -> TableView<'_> {
        match self {
            WorkerTable::Shared(t) => TableView::Shared(t),
            WorkerTable::Shard(s) => TableView::Shard(s),
        }
    }

    fn entries(&self) -> u64 {
        match self {
            // Shared-table entries are read off the table itself at
            // shutdown; avoid double counting across workers.
            WorkerTable::Shared(_) => 0,
            WorkerTable::Shard(s) => s.len() as u64,
        }
    }
}

pub(crate) fn spawn(
    shared: Arc<EngineShared>,
    listener: mio::net::TcpListener,
) -> Result<SpawnedThreads, String> {
    let workers = shared.matrix.threading.worker_count;
    let mut threads = Vec::with_capacity(workers + 1);
    let mut wakers = Vec::with_capacity(workers + 1);
    let mut intake_txs = Vec::with_capacity(workers);

    // Workers first, so the acceptor starts with every destination alive.
    for w in 0..workers {
        let poll = Poll::new().map_err(|e| format!("worker poll: {e}"))?;
        let waker =
            Arc::new(Waker::new(poll.registry(), WAKER).map_err(|e| format!("worker waker: {e}"))?);
        let (tx, rx) = crossbeam_channel::unbounded::<Conn>();
        intake_txs.push(tx);
        wakers.push(Arc::clone(&waker));

        let table = match &shared.shared_table {
            Some(t) => WorkerTable::Shared(Arc::clone(t)),
            None => WorkerTable::Shard(Shard::new(w, workers)),
        };
        let shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name(format!("rtc-w{w}"))
            .spawn(move || worker_loop(shared, w, poll, rx, table))
            .map_err(|e| format!("spawn worker: {e}"))?;
        threads.push(handle);
    }

    let accept_poll = Poll::new().map_err(|e| format!("acceptor poll: {e}"))?;
    let accept_waker = Arc::new(
        Waker::new(accept_poll.registry(), WAKER).map_err(|e| format!("acceptor waker: {e}"))?,
    );
    wakers.push(Arc::clone(&accept_waker));
    let worker_wakers: Vec<Arc<Waker>> = wakers[..workers].to_vec();
    {
        let shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("rtc-accept".to_string())
            .spawn(move || accept_loop(shared, accept_poll, listener, intake_txs, worker_wakers))
            .map_err(|e| format!("spawn acceptor: {e}"))?;
        threads.push(handle);
    }
    Ok((threads, wakers))
}

/// Acceptor: owns the listener and all not-yet-ready connections. Thread 0's
/// counter block belongs to it.
fn accept_loop(
    shared: Arc<EngineShared>,
    mut poll: Poll,
    mut listener: mio::net::TcpListener,
    intake_txs: Vec<crossbeam_channel::Sender<Conn>>,
    worker_wakers: Vec<Arc<Waker>>,
) -> ThreadFinal {
    let counters = shared.counters.thread(0);
    let mut pool = BufferPool::new(shared.matrix.buffers);
    let mut stats_sync = AllocStatsSync::default();
    let sample_mask = shared.matrix.sample_mask();
    let mut pending: Slab<Conn> = Slab::new();
    let mut events = Events::with_capacity(256);

    poll.registry()
        .register(&mut listener, LISTENER, Interest::READABLE)
        .expect("register listener");

    while !shared.shutdown.load(Relaxed) {
        if let Err(e) = poll.poll(&mut events, Some(POLL_TICK)) {
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            panic!("acceptor poll failed: {e}");
        }
        for event in events.iter() {
            match event.token() {
                WAKER => {}
                LISTENER => loop {
                    match listener.accept() {
                        Ok((mut stream, peer)) => {
                            let _ = stream.set_nodelay(true);
                            let key = pending.vacant_key();
                            poll.registry()
                                .register(
                                    &mut stream,
                                    Token(key),
                                    Interest::READABLE | Interest::WRITABLE,
                                )
                                .expect("register conn");
                            pending.insert(Conn::new(stream, peer, &mut pool));
                            counters.conns_opened.fetch_add(1, Relaxed);
                            // Drive once in case bytes beat the registration.
                            step_handshake(
                                key,
                                &mut pending,
                                &mut pool,
                                counters,
                                sample_mask,
                                &poll,
                                &intake_txs,
                                &worker_wakers,
                            );
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            break;
                        }
                    }
                },
                Token(key) => {
                    step_handshake(
                        key,
                        &mut pending,
                        &mut pool,
                        counters,
                        sample_mask,
                        &poll,
                        &intake_txs,
                        &worker_wakers,
                    );
                }
            }
        }
        stats_sync.push(pool.stats(), counters);
    }

    // Orderly teardown: flush nothing (handshake conns owe no data), drop.
    for conn in pending.drain() {
        counters.conns_closed.fetch_add(1, Relaxed);
        drop(conn);
    }
    stats_sync.push(pool.stats(), counters);
    ThreadFinal { shard_entries: 0 }
}

/// Advances one pending connection's handshake; on READY, transfers it to
/// its owning worker (datapath id mod worker count).
#[allow(clippy::too_many_arguments)]
fn step_handshake(
    key: usize,
    pending: &mut Slab<Conn>,
    pool: &mut BufferPool,
    counters: &super::counters::WorkerCounters,
    sample_mask: u64,
    poll: &Poll,
    intake_txs: &[crossbeam_channel::Sender<Conn>],
    worker_wakers: &[Arc<Waker>],
) {
    let Some(conn) = pending.get_mut(key) else { return };
    let mut ctx = InlineCtx { pool, counters, sample_mask };
    match drive_handshake(conn, &mut ctx) {
        Ok(false) => {}
        Ok(true) => {
            let mut conn = pending.remove(key);
            poll.registry().deregister(&mut conn.stream).expect("deregister conn");
            let target = shard_owner(conn.datapath_id, intake_txs.len());
            log::debug!(
                "switch dpid={:#x} from {} ready, assigned to worker {target}",
                conn.datapath_id,
                conn.peer
            );
            if intake_txs[target].send(conn).is_ok() {
                let _ = worker_wakers[target].wake();
            }
        }
        Err(reason) => {
            let mut conn = pending.remove(key);
            let _ = poll.registry().deregister(&mut conn.stream);
            close_counting(counters, &reason);
            log::debug!("handshake with {} failed: {reason:?}", conn.peer);
            conn.recycle(pool);
        }
    }
}

fn close_counting(counters: &super::counters::WorkerCounters, reason: &super::conn::CloseReason) {
    counters.conns_closed.fetch_add(1, Relaxed);
    if reason.is_protocol_error() {
        counters.protocol_errors.fetch_add(1, Relaxed);
    }
}

/// Worker: owns its connections, buffers, and (under the sharded strategy)
/// its exclusive slice of the MAC table.
fn worker_loop(
    shared: Arc<EngineShared>,
    index: usize,
    mut poll: Poll,
    intake: crossbeam_channel::Receiver<Conn>,
    mut table: WorkerTable,
) -> ThreadFinal {
    if shared.matrix.threading.pin_threads {
        affinity::pin_worker(index);
    }
    let counters = shared.counters.thread(index + 1);
    let mut pool = BufferPool::new(shared.matrix.buffers);
    let mut stats_sync = AllocStatsSync::default();
    let sample_mask = shared.matrix.sample_mask();
    let mut conns: Slab<Conn> = Slab::new();
    let mut events = Events::with_capacity(1024);

    while !shared.shutdown.load(Relaxed) {
        if let Err(e) = poll.poll(&mut events, Some(POLL_TICK)) {
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            panic!("worker {index} poll failed: {e}");
        }
        // Adopt transferred connections (checked every tick, not only on
        // waker events, so a missed wake costs latency, not liveness).
        while let Ok(mut conn) = intake.try_recv() {
            let key = conns.vacant_key();
            poll.registry()
                .register(&mut conn.stream, Token(key), Interest::READABLE | Interest::WRITABLE)
                .expect("register adopted conn");
            let entry = conns.insert(conn);
            // The features-reply burst may have carried packet-ins.
            drive_one(entry, &mut conns, &mut pool, counters, sample_mask, &mut table, &poll);
        }
        for event in events.iter() {
            match event.token() {
                WAKER => {}
                Token(key) => {
                    drive_one(key, &mut conns, &mut pool, counters, sample_mask, &mut table, &poll);
                }
            }
        }
        stats_sync.push(pool.stats(), counters);
    }

    // Final flush pass so replies already produced are not torn away.
    for (_, conn) in conns.iter_mut() {
        let mut ctx = InlineCtx { pool: &mut pool, counters, sample_mask };
        let _ = super::conn::flush_conn(conn, &mut ctx);
    }
    for conn in conns.drain() {
        counters.conns_closed.fetch_add(1, Relaxed);
        drop(conn);
    }
    stats_sync.push(pool.stats(), counters);
    ThreadFinal { shard_entries: table.entries() }
}

fn drive_one(
    key: usize,
    conns: &mut Slab<Conn>,
    pool: &mut BufferPool,
    counters: &super::counters::WorkerCounters,
    sample_mask: u64,
    table: &mut WorkerTable,
    poll: &Poll,
) {
    let Some(conn) = conns.get_mut(key) else { return };
    let outcome = {
        let mut ctx = InlineCtx { pool, counters, sample_mask };
        let mut view = table.view();
        drive_inline(conn, &mut ctx, &mut view)
    };
    if let DriveOutcome::Close(reason) = outcome {
        let mut conn = conns.remove(key);
        let _ = poll.registry().deregister(&mut conn.stream);
        close_counting(counters, &reason);
        log::debug!("closing {} (dpid {:#x}): {reason:?}", conn.peer, conn.datapath_id);
        conn.recycle(pool);
    }
}
