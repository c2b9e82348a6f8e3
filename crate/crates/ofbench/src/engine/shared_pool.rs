//! Shared-pool-queue threading: N workers share one event source and one
//! connection table. The poller sits behind a mutex, so exactly one thread
//! at a time can be waiting for events — the classic single-epoll controller
//! design, reproduced deliberately so its serialization cost is measurable.
//! Processing happens outside that lock, guarded per connection: each
//! connection lives in a slot whose mutex a worker must take before driving
//! it, with a `pending` flag to re-arm service when an event lands while the
//! connection is being driven elsewhere.
//!
//! Packets never change threads mid-flight — whichever worker takes the slot
//! runs the connection inline — so handoffs stay at zero; the costs this
//! model exposes are the poll mutex convoy and the shared-table stripe locks
//! (the sharded table is rejected at validation: with any worker able to
//! drive any connection, no worker could own a shard).

use std::sync::atomic::Ordering::Relaxed;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mio::{Events, Interest, Poll, Token, Waker};
use parking_lot::{Mutex, RwLock};
use slab::Slab;

use crate::bufferpool::BufferPool;
use crate::learnswitch::{SharedTable, TableView};

use super::conn::{drive_handshake, drive_inline, CloseReason, Conn, DriveOutcome, InlineCtx, Phase};
use super::counters::{AllocStatsSync, WorkerCounters};
use super::{affinity, EngineShared, SpawnedThreads, ThreadFinal};

const LISTENER: Token = Token(usize::MAX - 1);
const WAKER: Token = Token(usize::MAX - 2);
const POLL_TICK: Duration = Duration::from_millis(50);

struct SlotState {
    /// `None` while some worker is driving the connection.
    conn: Option<Conn>,
    /// An event arrived while the connection was taken; the taker must
    /// re-drive before putting it back.
    pending: bool,
    closed: bool,
}

struct PoolShared {
    engine: Arc<EngineShared>,
    /// The one-poller-at-a-time constraint, enforced by construction.
    poll: Mutex<Poll>,
    /// Registration handle, usable concurrently with polling.
    registry: mio::Registry,
    listener: Mutex<mio::net::TcpListener>,
    slots: RwLock<Slab<Arc<Mutex<SlotState>>>>,
}

pub(crate) fn spawn(
    shared: Arc<EngineShared>,
    mut listener: mio::net::TcpListener,
) -> Result<SpawnedThreads, String> {
    let workers = shared.matrix.threading.worker_count;
    let poll = Poll::new().map_err(|e| format!("pool poll: {e}"))?;
    let registry = poll.registry().try_clone().map_err(|e| format!("clone registry: {e}"))?;
    let waker = Arc::new(Waker::new(&registry, WAKER).map_err(|e| format!("pool waker: {e}"))?);
    registry
        .register(&mut listener, LISTENER, Interest::READABLE)
        .map_err(|e| format!("register listener: {e}"))?;

    let ps = Arc::new(PoolShared {
        engine: Arc::clone(&shared),
        poll: Mutex::new(poll),
        registry,
        listener: Mutex::new(listener),
        slots: RwLock::new(Slab::new()),
    });

    let mut threads = Vec::with_capacity(workers);
    for w in 0..workers {
        let ps = Arc::clone(&ps);
        let handle = std::thread::Builder::new()
            .name(format!("pool-w{w}"))
            .spawn(move || worker_loop(ps, w))
            .map_err(|e| format!("spawn worker: {e}"))?;
        threads.push(handle);
    }
    Ok((threads, vec![waker]))
}

fn worker_loop(ps: Arc<PoolShared>, index: usize) -> ThreadFinal {
    if ps.engine.matrix.threading.pin_threads {
        affinity::pin_worker(index);
    }
    let counters = ps.engine.counters.thread(index);
    let mut pool = BufferPool::new(ps.engine.matrix.buffers);
    let mut stats_sync = AllocStatsSync::default();
    let sample_mask = ps.engine.matrix.sample_mask();
    let table = Arc::clone(
        ps.engine.shared_table.as_ref().expect("shared-pool model uses the shared table"),
    );
    let mut events = Events::with_capacity(1024);

    loop {
        {
            // Only one worker can be in the event wait; the others convoy
            // here. That serialization is this model's defining property.
            let mut poll = ps.poll.lock();
            if ps.engine.shutdown.load(Relaxed) {
                break;
            }
            if let Err(e) = poll.poll(&mut events, Some(POLL_TICK)) {
                if e.kind() == std::io::ErrorKind::Interrupted {
                    continue;
                }
                panic!("pool worker {index} poll failed: {e}");
            }
        }
        if ps.engine.shutdown.load(Relaxed) {
            break;
        }
        for event in events.iter() {
            match event.token() {
                WAKER => {}
                LISTENER => accept_some(&ps, counters, &mut pool, sample_mask, &table),
                Token(key) => {
                    service_slot(&ps, key, counters, &mut pool, sample_mask, &table);
                }
            }
        }
        stats_sync.push(pool.stats(), counters);
    }
    stats_sync.push(pool.stats(), counters);
    ThreadFinal { shard_entries: 0 }
}

/// Accepts every pending connection. `try_lock` keeps this single-threaded
/// without blocking: if another worker is mid-accept it will drain the queue
/// itself, and any connection arriving after its drain raises a fresh event.
fn accept_some(
    ps: &PoolShared,
    counters: &WorkerCounters,
    pool: &mut BufferPool,
    sample_mask: u64,
    table: &Arc<SharedTable>,
) {
    let Some(listener) = ps.listener.try_lock() else { return };
    loop {
        match listener.accept() {
            Ok((mut stream, peer)) => {
                let _ = stream.set_nodelay(true);
                let key = {
                    let mut slots = ps.slots.write();
                    slots.insert(Arc::new(Mutex::new(SlotState {
                        conn: None,
                        pending: false,
                        closed: false,
                    })))
                };
                if let Err(e) = ps.registry.register(
                    &mut stream,
                    Token(key),
                    Interest::READABLE | Interest::WRITABLE,
                ) {
                    log::warn!("register conn from {peer}: {e}");
                    ps.slots.write().remove(key);
                    continue;
                }
                let conn = Conn::new(stream, peer, pool);
                {
                    let slot = ps.slots.read().get(key).cloned().expect("just inserted");
                    slot.lock().conn = Some(conn);
                }
                counters.conns_opened.fetch_add(1, Relaxed);
                // Bytes may have beaten the registration; drive once now.
                service_slot(ps, key, counters, pool, sample_mask, table);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => {
                log::warn!("accept failed: {e}");
                break;
            }
        }
    }
}

/// Takes the connection out of its slot and drives it to quiescence,
/// honoring the pending flag (events observed by other workers while we held
/// the connection).
fn service_slot(
    ps: &PoolShared,
    key: usize,
    counters: &WorkerCounters,
    pool: &mut BufferPool,
    sample_mask: u64,
    table: &Arc<SharedTable>,
) {
    let Some(slot) = ps.slots.read().get(key).cloned() else { return };
    let mut conn = {
        let mut guard = slot.lock();
        if guard.closed {
            return;
        }
        match guard.conn.take() {
            Some(conn) => conn,
            None => {
                // Someone else is driving it; make them go around again.
                guard.pending = true;
                return;
            }
        }
    };

    loop {
        let close = drive_conn(&mut conn, counters, pool, sample_mask, table);
        if let Some(reason) = close {
            slot.lock().closed = true;
            let _ = ps.registry.deregister(&mut conn.stream);
            counters.conns_closed.fetch_add(1, Relaxed);
            if reason.is_protocol_error() {
                counters.protocol_errors.fetch_add(1, Relaxed);
            }
            log::debug!("closing {} (dpid {:#x}): {reason:?}", conn.peer, conn.datapath_id);
            conn.recycle(pool);
            ps.slots.write().remove(key);
            return;
        }
        let mut guard = slot.lock();
        if guard.pending {
            guard.pending = false;
            drop(guard);
            continue;
        }
        guard.conn = Some(conn);
        return;
    }
}

fn drive_conn(
    conn: &mut Conn,
    counters: &WorkerCounters,
    pool: &mut BufferPool,
    sample_mask: u64,
    table: &Arc<SharedTable>,
) -> Option<CloseReason> {
    if conn.phase != Phase::Ready {
        let mut ctx = InlineCtx { pool, counters, sample_mask };
        match drive_handshake(conn, &mut ctx) {
            Err(reason) => return Some(reason),
            Ok(true) => {}
            Ok(false) => return None,
        }
    }
    let mut ctx = InlineCtx { pool, counters, sample_mask };
    let mut view = TableView::Shared(table);
    match drive_inline(conn, &mut ctx, &mut view) {
        DriveOutcome::Continue => None,
        DriveOutcome::Close(reason) => Some(reason),
    }
}
