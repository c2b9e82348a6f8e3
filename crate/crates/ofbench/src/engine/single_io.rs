//! Single-IO-queue threading: one IO thread owns every socket and the
//! listener; a pool of workers does the protocol work. Input batches flow
//! IO → worker over one bounded queue, finished replies flow back over
//! another, and the IO thread writes them out. Every packet therefore
//! crosses a thread boundary twice (in and back), which is the point: this
//! is the staged design whose handoff cost the counters make visible.
//!
//! Ordering: at most one batch per connection is in flight at a time, so a
//! connection's replies are produced and written strictly in arrival order
//! even though different connections' batches run on different workers.
//!
//! Buffer discipline (pooled strategy): batch and reply buffers both come
//! from the IO thread's pool and return to it, so the pool reaches steady
//! state no matter how many batches flow. A batch travels as the
//! connection's input buffer itself (swapped for a fresh one, any partial
//! frame tail copied over); the reply buffer is queued onto the connection
//! for writing when it comes back. The per-packet-object strategy instead
//! copies the batch out, decodes owned messages, and copies replies into the
//! connection's output buffer — the allocation/copy churn it exists to
//! demonstrate.

use std::collections::VecDeque;
use std::sync::atomic::Ordering::Relaxed;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mio::{Events, Interest, Poll, Token, Waker};
use slab::Slab;

use crate::bufferpool::{BufferPool, BufferStrategyKind, IoBuffer};
use crate::learnswitch::TableView;
use crate::ofwire::{self, type_code, LEARNED_FLOW_MOD_LEN};

use super::conn::{
    self, drive_handshake, queue_control_msg, CloseReason, Conn, InlineCtx, Phase,
};
use super::counters::{AllocStatsSync, PhaseSample, WorkerCounters};
use super::{affinity, EngineShared, SpawnedThreads, ThreadFinal};

const LISTENER: Token = Token(usize::MAX - 1);
const WAKER: Token = Token(usize::MAX - 2);
const POLL_TICK: Duration = Duration::from_millis(100);

/// A batch of complete frames handed to a worker.
struct WorkItem {
    conn_key: usize,
    datapath_id: u64,
    /// Frames start at `buf.readable()[0]`; exactly `batch_len` bytes of it
    /// are part of the batch (a swapped input buffer may carry extra tail
    /// bytes that belong to the next batch's partial frame).
    buf: IoBuffer,
    batch_len: usize,
    n_frames: u64,
    /// Reply sink. Pooled mode: pre-acquired from the IO pool here so worker
    /// pools see no traffic and the whole cycle reaches allocation steady
    /// state. Object mode: `None`, the worker allocates (and that is
    /// counted).
    reply: Option<IoBuffer>,
    sample: Option<PhaseSample>,
}

/// A processed batch on its way back to the socket.
struct ReplyItem {
    conn_key: usize,
    /// The consumed input buffer, returned for release into the IO pool.
    used: IoBuffer,
    reply: IoBuffer,
    sample: Option<PhaseSample>,
    close: Option<CloseReason>,
}

struct IoConn {
    conn: Conn,
    in_flight: bool,
}

pub(crate) fn spawn(
    shared: Arc<EngineShared>,
    listener: mio::net::TcpListener,
) -> Result<SpawnedThreads, String> {
    let workers = shared.matrix.threading.worker_count;
    let cap = shared.matrix.queue_capacity;
    let (work_tx, work_rx) = crossbeam_channel::bounded::<WorkItem>(cap);
    let (reply_tx, reply_rx) = crossbeam_channel::bounded::<ReplyItem>(cap);

    let io_poll = Poll::new().map_err(|e| format!("io poll: {e}"))?;
    let io_waker =
        Arc::new(Waker::new(io_poll.registry(), WAKER).map_err(|e| format!("io waker: {e}"))?);

    let mut threads = Vec::with_capacity(workers + 1);
    for w in 0..workers {
        let shared = Arc::clone(&shared);
        let work_rx = work_rx.clone();
        let reply_tx = reply_tx.clone();
        let io_waker = Arc::clone(&io_waker);
        let handle = std::thread::Builder::new()
            .name(format!("sio-w{w}"))
            .spawn(move || worker_loop(shared, w, work_rx, reply_tx, io_waker))
            .map_err(|e| format!("spawn worker: {e}"))?;
        threads.push(handle);
    }
    {
        let shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("sio-io".to_string())
            .spawn(move || io_loop(shared, io_poll, listener, work_tx, reply_rx))
            .map_err(|e| format!("spawn io thread: {e}"))?;
        threads.push(handle);
    }
    Ok((threads, vec![io_waker]))
}

fn io_loop(
    shared: Arc<EngineShared>,
    mut poll: Poll,
    mut listener: mio::net::TcpListener,
    work_tx: crossbeam_channel::Sender<WorkItem>,
    reply_rx: crossbeam_channel::Receiver<ReplyItem>,
) -> ThreadFinal {
    // Thread 0 is the IO thread, matching the other models' convention.
    let counters = shared.counters.thread(0);
    let mut pool = BufferPool::new(shared.matrix.buffers);
    let mut stats_sync = AllocStatsSync::default();
    let sample_mask = shared.matrix.sample_mask();
    let object_mode = shared.matrix.buffers.kind == BufferStrategyKind::PerPacketObject;
    let mut conns: Slab<IoConn> = Slab::new();
    let mut events = Events::with_capacity(1024);
    // Connections with dispatchable frames that could not be sent because
    // the work queue was full; retried after every reply and every tick.
    let mut dispatch_backlog: VecDeque<usize> = VecDeque::new();

    poll.registry()
        .register(&mut listener, LISTENER, Interest::READABLE)
        .expect("register listener");

    while !shared.shutdown.load(Relaxed) {
        if let Err(e) = poll.poll(&mut events, Some(POLL_TICK)) {
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            panic!("io poll failed: {e}");
        }

        // Replies first: they free in-flight slots and queue capacity.
        while let Ok(reply) = reply_rx.try_recv() {
            handle_reply(
                reply, &mut conns, &mut pool, counters, sample_mask, object_mode, &work_tx,
                &mut dispatch_backlog, &poll,
            );
        }

        for event in events.iter() {
            match event.token() {
                WAKER => {}
                LISTENER => loop {
                    match listener.accept() {
                        Ok((mut stream, peer)) => {
                            let _ = stream.set_nodelay(true);
                            let key = conns.vacant_key();
                            poll.registry()
                                .register(
                                    &mut stream,
                                    Token(key),
                                    Interest::READABLE | Interest::WRITABLE,
                                )
                                .expect("register conn");
                            conns.insert(IoConn {
                                conn: Conn::new(stream, peer, &mut pool),
                                in_flight: false,
                            });
                            counters.conns_opened.fetch_add(1, Relaxed);
                            service_conn(
                                key, &mut conns, &mut pool, counters, sample_mask, object_mode,
                                &work_tx, &mut dispatch_backlog, &poll,
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
                    service_conn(
                        key, &mut conns, &mut pool, counters, sample_mask, object_mode, &work_tx,
                        &mut dispatch_backlog, &poll,
                    );
                }
            }
        }

        // Queue-full retries.
        for _ in 0..dispatch_backlog.len() {
            let key = dispatch_backlog.pop_front().expect("len checked");
            service_conn(
                key, &mut conns, &mut pool, counters, sample_mask, object_mode, &work_tx,
                &mut dispatch_backlog, &poll,
            );
        }
        stats_sync.push(pool.stats(), counters);
    }

    for (_, io_conn) in conns.iter_mut() {
        let mut ctx = InlineCtx { pool: &mut pool, counters, sample_mask };
        let _ = conn::flush_conn(&mut io_conn.conn, &mut ctx);
    }
    for io_conn in conns.drain() {
        counters.conns_closed.fetch_add(1, Relaxed);
        drop(io_conn);
    }
    stats_sync.push(pool.stats(), counters);
    ThreadFinal { shard_entries: 0 }
}

/// Reads from one connection, advances its handshake if needed, and
/// dispatches batches of complete frames to the workers.
///
/// Polling is edge-triggered, so this must not return while the socket still
/// holds readable bytes unless something else is guaranteed to re-enter it:
/// it loops until either the socket reports WouldBlock, or the input buffer
/// is full with a batch in flight (whose reply re-enters via
/// [`handle_reply`]), or the work queue is full (retried from the backlog).
#[allow(clippy::too_many_arguments)]
fn service_conn(
    key: usize,
    conns: &mut Slab<IoConn>,
    pool: &mut BufferPool,
    counters: &WorkerCounters,
    sample_mask: u64,
    object_mode: bool,
    work_tx: &crossbeam_channel::Sender<WorkItem>,
    dispatch_backlog: &mut VecDeque<usize>,
    poll: &Poll,
) {
    {
        let Some(io_conn) = conns.get_mut(key) else { return };
        if io_conn.conn.phase != Phase::Ready {
            let mut ctx = InlineCtx { pool, counters, sample_mask };
            match drive_handshake(&mut io_conn.conn, &mut ctx) {
                Ok(false) => return,
                Ok(true) => {} // fall through; inbuf may hold packet-ins already
                Err(reason) => {
                    close_conn(key, conns, pool, counters, reason, poll);
                    return;
                }
            }
        }
    }

    enum Next {
        Done,
        Again,
        Backlog,
        Close(CloseReason),
    }

    loop {
        let next = {
            let Some(io_conn) = conns.get_mut(key) else { return };

            // Pull in whatever the socket has, until it blocks or the input
            // buffer fills (while a batch is in flight the buffer is the
            // backlog bound; TCP flow control pushes back beyond it).
            let socket_drained;
            loop {
                let mut ctx = InlineCtx { pool, counters, sample_mask };
                match conn::read_some(&mut io_conn.conn, &mut ctx) {
                    Ok(Some(_)) => continue,
                    Ok(None) => {
                        // Space left over means the socket itself blocked;
                        // a full buffer means there may be more to read.
                        socket_drained = !io_conn.conn.inbuf.writable().is_empty();
                        break;
                    }
                    Err(reason) => {
                        close_conn(key, conns, pool, counters, reason, poll);
                        return;
                    }
                }
            }

            // Also flush anything parked (echo replies from the handshake
            // path, partially written batches).
            {
                let mut ctx = InlineCtx { pool, counters, sample_mask };
                if let Err(reason) = conn::flush_conn(&mut io_conn.conn, &mut ctx) {
                    close_conn(key, conns, pool, counters, reason, poll);
                    return;
                }
            }

            let cap_before = io_conn.conn.inbuf.capacity();
            match try_dispatch(io_conn, key, pool, counters, sample_mask, object_mode, work_tx) {
                Dispatch::Close(reason) => Next::Close(reason),
                Dispatch::QueueFull => Next::Backlog,
                Dispatch::Sent | Dispatch::Nothing if socket_drained => Next::Done,
                // Socket not drained. A batch in flight guarantees re-entry
                // through its reply; otherwise keep going as long as the
                // dispatch made room (shipped a batch or grew the buffer).
                Dispatch::Sent => Next::Again,
                Dispatch::Nothing if io_conn.in_flight => Next::Done,
                Dispatch::Nothing if io_conn.conn.inbuf.capacity() > cap_before => Next::Again,
                Dispatch::Nothing => Next::Done, // defensive: no progress possible
            }
        };
        match next {
            Next::Done => return,
            Next::Again => continue,
            Next::Backlog => {
                dispatch_backlog.push_back(key);
                return;
            }
            Next::Close(reason) => {
                close_conn(key, conns, pool, counters, reason, poll);
                return;
            }
        }
    }
}

enum Dispatch {
    Sent,
    Nothing,
    QueueFull,
    Close(CloseReason),
}

/// Cuts the longest run of complete frames off the connection's input buffer
/// and ships it to the workers, if the connection is ready, idle, and has at
/// least one complete frame.
fn try_dispatch(
    io_conn: &mut IoConn,
    key: usize,
    pool: &mut BufferPool,
    counters: &WorkerCounters,
    sample_mask: u64,
    object_mode: bool,
    work_tx: &crossbeam_channel::Sender<WorkItem>,
) -> Dispatch {
    if io_conn.conn.phase != Phase::Ready || io_conn.in_flight {
        return Dispatch::Nothing;
    }
    let readable = io_conn.conn.inbuf.readable();
    let mut batch_len = 0usize;
    let mut n_frames = 0u64;
    loop {
        match ofwire::frame_len(&readable[batch_len..]) {
            Ok(Some(len)) if batch_len + len <= readable.len() => {
                batch_len += len;
                n_frames += 1;
            }
            Ok(_) => break,
            Err(e) => return Dispatch::Close(CloseReason::Wire(e)),
        }
    }
    if n_frames == 0 {
        // A lone partial frame bigger than the buffer still needs room. The
        // header already declares the full length even though the body has
        // not arrived yet (the frame walk above vetted the header itself).
        let need = if readable.len() >= ofwire::HEADER_LEN {
            ofwire::parse_header(readable).map_or(0, |header| header.length as usize)
        } else {
            0
        };
        if need > io_conn.conn.inbuf.capacity() {
            let taken = std::mem::replace(&mut io_conn.conn.inbuf, IoBuffer::empty());
            io_conn.conn.inbuf = pool.grow_exclusive(taken, need.next_power_of_two());
        }
        return Dispatch::Nothing;
    }

    let sample = if io_conn.conn.sample_pending.is_none()
        && (io_conn.conn.processed & sample_mask) == 0
    {
        Some(PhaseSample::start())
    } else {
        None
    };

    let item = if object_mode {
        // Copy the batch out; the connection keeps its buffer.
        let mut batch = pool.acquire(batch_len);
        batch.writable()[..batch_len].copy_from_slice(&io_conn.conn.inbuf.readable()[..batch_len]);
        batch.advance_write(batch_len);
        pool.record_external_copy(batch_len as u64);
        io_conn.conn.inbuf.advance_read(batch_len);
        if io_conn.conn.inbuf.is_empty() {
            io_conn.conn.inbuf.clear();
        }
        WorkItem {
            conn_key: key,
            datapath_id: io_conn.conn.datapath_id,
            buf: batch,
            batch_len,
            n_frames,
            reply: None,
            sample,
        }
    } else {
        // Swap the input buffer itself into the batch; copy any partial tail
        // into the fresh one so framing never splits across buffers.
        let size = pool.strategy().pool_buffer_size;
        let mut fresh = pool.acquire(size.max(io_conn.conn.inbuf.capacity()));
        let tail_len = io_conn.conn.inbuf.readable().len() - batch_len;
        if tail_len > 0 {
            fresh.writable()[..tail_len]
                .copy_from_slice(&io_conn.conn.inbuf.readable()[batch_len..]);
            fresh.advance_write(tail_len);
            pool.record_external_copy(tail_len as u64);
        }
        let batch = std::mem::replace(&mut io_conn.conn.inbuf, fresh);
        let reply = pool.acquire((n_frames as usize * LEARNED_FLOW_MOD_LEN).max(size));
        WorkItem {
            conn_key: key,
            datapath_id: io_conn.conn.datapath_id,
            buf: batch,
            batch_len,
            n_frames,
            reply: Some(reply),
            sample,
        }
    };

    match work_tx.try_send(item) {
        Ok(()) => {
            io_conn.in_flight = true;
            io_conn.conn.processed += n_frames;
            counters.handoffs.fetch_add(n_frames, Relaxed);
            Dispatch::Sent
        }
        Err(crossbeam_channel::TrySendError::Full(item)) => {
            // Undo: put the bytes back where they came from.
            undo_dispatch(io_conn, item, pool, object_mode);
            Dispatch::QueueFull
        }
        Err(crossbeam_channel::TrySendError::Disconnected(_)) => {
            Dispatch::Close(CloseReason::Shutdown)
        }
    }
}

/// Reverses the buffer surgery of a dispatch whose queue send failed.
fn undo_dispatch(io_conn: &mut IoConn, item: WorkItem, pool: &mut BufferPool, object_mode: bool) {
    if object_mode {
        // The batch was a copy; re-prepend is unnecessary — the original
        // bytes were consumed, so splice them back in front.
        let mut restored = pool.acquire(item.batch_len + io_conn.conn.inbuf.readable().len());
        restored.writable()[..item.batch_len].copy_from_slice(&item.buf.readable()[..item.batch_len]);
        restored.advance_write(item.batch_len);
        let rest = io_conn.conn.inbuf.readable().len();
        restored.writable()[..rest].copy_from_slice(io_conn.conn.inbuf.readable());
        restored.advance_write(rest);
        pool.record_external_copy((item.batch_len + rest) as u64);
        let old = std::mem::replace(&mut io_conn.conn.inbuf, restored);
        pool.release(old);
        pool.release(item.buf);
    } else {
        // The batch buffer still holds batch + (copied-away) tail; the fresh
        // buffer holds the tail. Swap back and drop the fresh one.
        let fresh = std::mem::replace(&mut io_conn.conn.inbuf, item.buf);
        pool.release(fresh);
        if let Some(r) = item.reply {
            pool.release(r);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn handle_reply(
    reply: ReplyItem,
    conns: &mut Slab<IoConn>,
    pool: &mut BufferPool,
    counters: &WorkerCounters,
    sample_mask: u64,
    object_mode: bool,
    work_tx: &crossbeam_channel::Sender<WorkItem>,
    dispatch_backlog: &mut VecDeque<usize>,
    poll: &Poll,
) {
    let ReplyItem { conn_key, used, reply, sample, close } = reply;
    let Some(io_conn) = conns.get_mut(conn_key) else {
        // Connection died while the batch was in flight.
        pool.release(used);
        pool.release(reply);
        return;
    };
    io_conn.in_flight = false;
    pool.release(used);

    if let Some(reason) = close {
        pool.release(reply);
        close_conn(conn_key, conns, pool, counters, reason, poll);
        return;
    }

    if object_mode {
        // Copy the serialized replies into the connection's output buffer —
        // the final stage copy of the object pipeline.
        let bytes = reply.readable();
        conn::ensure_out_space(&mut io_conn.conn.outbuf, bytes.len(), pool);
        io_conn.conn.outbuf.writable()[..bytes.len()].copy_from_slice(bytes);
        io_conn.conn.outbuf.advance_write(bytes.len());
        pool.record_external_copy(bytes.len() as u64);
        pool.release(reply);
    } else {
        io_conn.conn.push_out_queue(reply);
    }
    if io_conn.conn.sample_pending.is_none() {
        io_conn.conn.sample_pending = sample;
    }

    // The in-flight slot is free again. Re-drive the full service path:
    // bytes that arrived while the batch was out may be sitting in the
    // kernel socket buffer, and with edge-triggered polling they will never
    // raise another readable event — they must be read and dispatched now.
    // This also flushes the reply bytes queued above.
    service_conn(
        conn_key,
        conns,
        pool,
        counters,
        sample_mask,
        object_mode,
        work_tx,
        dispatch_backlog,
        poll,
    );
}

fn close_conn(
    key: usize,
    conns: &mut Slab<IoConn>,
    pool: &mut BufferPool,
    counters: &WorkerCounters,
    reason: CloseReason,
    poll: &Poll,
) {
    let Some(mut io_conn) = conns.try_remove(key) else { return };
    let _ = poll.registry().deregister(&mut io_conn.conn.stream);
    counters.conns_closed.fetch_add(1, Relaxed);
    if reason.is_protocol_error() {
        counters.protocol_errors.fetch_add(1, Relaxed);
    }
    log::debug!("closing {} (dpid {:#x}): {reason:?}", io_conn.conn.peer, io_conn.conn.datapath_id);
    io_conn.conn.recycle(pool);
}

fn worker_loop(
    shared: Arc<EngineShared>,
    index: usize,
    work_rx: crossbeam_channel::Receiver<WorkItem>,
    reply_tx: crossbeam_channel::Sender<ReplyItem>,
    io_waker: Arc<Waker>,
) -> ThreadFinal {
    if shared.matrix.threading.pin_threads {
        affinity::pin_worker(index);
    }
    // Block 0 belongs to the IO thread; workers take 1..=N.
    let counters = shared.counters.thread(index + 1);
    let mut pool = BufferPool::new(shared.matrix.buffers);
    let mut stats_sync = AllocStatsSync::default();
    let sample_mask = shared.matrix.sample_mask();
    let table = shared.shared_table.as_ref().expect("queued models use the shared table");

    while !shared.shutdown.load(Relaxed) {
        let mut item = match work_rx.recv_timeout(POLL_TICK) {
            Ok(item) => item,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                stats_sync.push(pool.stats(), counters);
                continue;
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
        };

        let mut reply = match item.reply.take() {
            Some(r) => r,
            None => pool.acquire(item.n_frames as usize * LEARNED_FLOW_MOD_LEN),
        };
        let mut sample = item.sample.take();
        let close = {
            let mut ctx = InlineCtx { pool: &mut pool, counters, sample_mask };
            let mut view = TableView::Shared(table);
            process_batch(&item, &mut reply, &mut ctx, &mut view, &mut sample, counters)
        };
        counters.handoffs.fetch_add(item.n_frames, Relaxed);
        let send = reply_tx.send(ReplyItem {
            conn_key: item.conn_key,
            used: item.buf,
            reply,
            sample,
            close: close.err(),
        });
        if send.is_err() {
            break; // io thread gone; shutting down
        }
        let _ = io_waker.wake();
        stats_sync.push(pool.stats(), counters);
    }
    stats_sync.push(pool.stats(), counters);
    ThreadFinal { shard_entries: 0 }
}

/// Processes every frame in a batch, appending replies in order.
fn process_batch(
    item: &WorkItem,
    reply: &mut IoBuffer,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
    sample: &mut Option<PhaseSample>,
    counters: &WorkerCounters,
) -> Result<(), CloseReason> {
    let bytes = &item.buf.readable()[..item.batch_len];
    let mut off = 0usize;
    let mut first = true;
    while off < item.batch_len {
        let len = match ofwire::frame_len(&bytes[off..]).map_err(CloseReason::Wire)? {
            Some(len) if off + len <= item.batch_len => len,
            // The IO thread only ships complete frames; anything else means
            // the batch walker and framer disagree — close defensively.
            _ => return Err(CloseReason::Wire(crate::ofwire::WireError::TruncatedBody {
                expected: item.batch_len - off,
                got: 0,
            })),
        };
        let frame = &bytes[off..off + len];
        if frame[1] == type_code::PACKET_IN {
            let mut frame_sample = if first { sample.take() } else { None };
            let n = if ctx.pool.strategy().kind == BufferStrategyKind::PerPacketObject {
                conn::process_packet_in_owned(
                    frame, item.datapath_id, reply, ctx, table, &mut frame_sample,
                )?
            } else {
                conn::process_packet_in_borrowed(
                    frame, item.datapath_id, reply, ctx, table, &mut frame_sample,
                )?
            };
            if let Some(mut s) = frame_sample {
                s.reply_len = n as u32;
                *sample = Some(s);
            }
            counters.packets_in.fetch_add(1, Relaxed);
            counters.flow_mods.fetch_add(1, Relaxed);
        } else {
            // Rare control frames that slipped into a data batch.
            match ofwire::decode_frame(frame).map_err(CloseReason::Wire)? {
                ofwire::OfMessage::EchoRequest(e) => {
                    queue_control_msg(
                        reply,
                        &ofwire::OfMessage::EchoReply(ofwire::Echo {
                            xid: e.xid,
                            payload: e.payload,
                        }),
                        ctx.pool,
                    );
                }
                ofwire::OfMessage::EchoReply(_)
                | ofwire::OfMessage::Error(_)
                | ofwire::OfMessage::FlowMod(_)
                | ofwire::OfMessage::PacketOut(_)
                | ofwire::OfMessage::Unknown(_) => {}
                msg => {
                    return Err(CloseReason::OutOfPhase {
                        msg: msg.msg_type(),
                        phase: Phase::Ready,
                    })
                }
            }
        }
        first = false;
        off += len;
    }
    Ok(())
}
