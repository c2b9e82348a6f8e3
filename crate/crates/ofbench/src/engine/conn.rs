//! Per-connection state machine and frame pump, shared by every threading
//! model.
//!
//! A connection moves through three phases: waiting for the switch's HELLO,
//! waiting for its FEATURES_REPLY (we send our HELLO and FEATURES_REQUEST as
//! soon as its HELLO arrives), then READY, where the only expected traffic is
//! packet-ins (plus echo keepalives). Framing, the handshake, backpressure,
//! and reply flushing live here; the threading models differ only in *which
//! thread* runs these routines and where the MAC table lives.
//!
//! Invariants:
//! - every complete frame is consumed exactly once, in arrival order;
//! - every packet-in in READY produces exactly one reply message;
//! - an undecodable or out-of-phase frame closes the connection (counted as
//!   a protocol error) — it never panics and never desynchronizes framing;
//! - buffer ownership: `inbuf`/`outbuf` belong to this connection alone, and
//!   travel back to a pool when the connection closes.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::time::Instant;

use mio::net::TcpStream;

use crate::bufferpool::{BufferPool, BufferStrategyKind, IoBuffer};
use crate::engine::counters::{PhaseSample, WorkerCounters};
use crate::learnswitch::{handle_packet_in, Decision, TableView};
use crate::ofwire::{
    self, type_code, Echo, MsgType, OfMessage, WireError, OFPP_FLOOD,
};

/// Handshake progress of one switch connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Nothing valid seen yet; the first frame must be the switch's HELLO.
    ExpectHello,
    /// Our HELLO + FEATURES_REQUEST are queued/sent; awaiting FEATURES_REPLY.
    FeaturesRequestSent,
    /// Datapath id known; packet-ins are processed.
    Ready,
}

/// Why a connection was (or must be) closed.
#[derive(Debug)]
pub enum CloseReason {
    /// Clean EOF from the peer.
    PeerClosed,
    IoError(io::Error),
    /// Undecodable bytes: bad length, bad version, truncated body.
    Wire(WireError),
    /// A well-formed message that is illegal in the current phase,
    /// e.g. a packet-in before the handshake finished.
    OutOfPhase { msg: MsgType, phase: Phase },
    /// Engine is shutting down.
    Shutdown,
}

impl CloseReason {
    /// Protocol errors are the peer's fault and are counted separately from
    /// ordinary disconnects.
    pub fn is_protocol_error(&self) -> bool {
        matches!(self, CloseReason::Wire(_) | CloseReason::OutOfPhase { .. })
    }
}

/// Stop feeding frames into processing once this many reply bytes are parked
/// on a connection; resumes as soon as a flush drains below it. Prevents a
/// peer that reads slowly while writing fast from ballooning our outbuf.
pub const OUT_BACKLOG_LIMIT: usize = 256 * 1024;

/// One switch connection and everything owned by it.
#[derive(Debug)]
pub struct Conn {
    pub stream: TcpStream,
    pub peer: SocketAddr,
    pub phase: Phase,
    pub datapath_id: u64,
    pub inbuf: IoBuffer,
    pub outbuf: IoBuffer,
    /// Extra pre-encoded reply buffers (used by the queued models, whose
    /// replies arrive from workers as whole buffers); drained after `outbuf`.
    pub out_queue: VecDeque<IoBuffer>,
    queued_out_bytes: usize,
    /// Packet-ins processed on this connection; drives phase sampling.
    pub processed: u64,
    /// At most one phase sample rides a connection at a time; committed by
    /// the flush that carries its reply.
    pub sample_pending: Option<PhaseSample>,
    /// Set when a write hit WouldBlock; cleared by a successful drain.
    pub want_write: bool,
}

impl Conn {
    pub fn new(stream: TcpStream, peer: SocketAddr, pool: &mut BufferPool) -> Conn {
        let size = pool.strategy().pool_buffer_size;
        Conn {
            stream,
            peer,
            phase: Phase::ExpectHello,
            datapath_id: 0,
            inbuf: pool.acquire(size),
            outbuf: pool.acquire(size),
            out_queue: VecDeque::new(),
            queued_out_bytes: 0,
            processed: 0,
            sample_pending: None,
            want_write: false,
        }
    }

    /// Reply bytes parked on this connection (outbuf + queued buffers).
    pub fn out_backlog(&self) -> usize {
        self.outbuf.readable().len() + self.queued_out_bytes
    }

    pub fn push_out_queue(&mut self, buf: IoBuffer) {
        self.queued_out_bytes += buf.readable().len();
        self.out_queue.push_back(buf);
    }

    /// Returns the connection's buffers to `pool` on close.
    pub fn recycle(self, pool: &mut BufferPool) {
        pool.release(self.inbuf);
        pool.release(self.outbuf);
        for b in self.out_queue {
            pool.release(b);
        }
    }
}

/// Everything a thread needs to run connections inline: its buffer pool, its
/// counter block, and the sampling mask (`processed & mask == 0` samples).
pub struct InlineCtx<'a> {
    pub pool: &'a mut BufferPool,
    pub counters: &'a WorkerCounters,
    pub sample_mask: u64,
}

/// What a frame-processing step observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    Handled,
    /// This frame completed the handshake (it was the FEATURES_REPLY).
    NewlyReady,
}

/// Result of driving a connection through read/process/flush.
#[derive(Debug)]
pub enum DriveOutcome {
    /// Connection quiescent and healthy; wait for the next event.
    Continue,
    Close(CloseReason),
}

/// Makes sure `outbuf` can take `needed` more bytes, compacting first and
/// growing through the pool as a last resort.
pub(crate) fn ensure_out_space(outbuf: &mut IoBuffer, needed: usize, pool: &mut BufferPool) {
    if outbuf.writable().len() >= needed {
        return;
    }
    pool.compact(outbuf);
    if outbuf.writable().len() >= needed {
        return;
    }
    let want = (outbuf.write_cursor() + needed).next_power_of_two();
    let grown = pool.grow_exclusive(std::mem::replace(outbuf, IoBuffer::empty()), want);
    *outbuf = grown;
}

/// Appends an encoded control message (hello, features request, echo reply)
/// to the connection's outbuf. Control frames are rare — once per connection
/// or per keepalive — so this path does not participate in the per-packet
/// allocation accounting.
pub(crate) fn queue_control_msg(outbuf: &mut IoBuffer, msg: &OfMessage, pool: &mut BufferPool) {
    let needed = ofwire::encoded_len(msg);
    ensure_out_space(outbuf, needed, pool);
    let n = ofwire::encode_into(msg, outbuf.writable()).expect("space ensured");
    outbuf.advance_write(n);
}

/// Handles one complete frame. `frame` borrows from the connection's inbuf,
/// so the connection is passed as disjoint fields rather than `&mut Conn`.
#[allow(clippy::too_many_arguments)]
fn handle_frame(
    frame: &[u8],
    phase: &mut Phase,
    datapath_id: &mut u64,
    outbuf: &mut IoBuffer,
    processed: &mut u64,
    sample_pending: &mut Option<PhaseSample>,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
) -> Result<FrameOutcome, CloseReason> {
    // Hot path: a packet-in on a ready connection. Type dispatch by raw byte
    // so the common case skips the full decode match.
    if *phase == Phase::Ready && frame[1] == type_code::PACKET_IN {
        let sampling = sample_pending.is_none() && (*processed & ctx.sample_mask) == 0;
        let mut sample = if sampling { Some(PhaseSample::start()) } else { None };

        let object_mode = ctx.pool.strategy().kind == BufferStrategyKind::PerPacketObject;
        let reply_len = if object_mode {
            process_packet_in_owned(frame, *datapath_id, outbuf, ctx, table, &mut sample)?
        } else {
            process_packet_in_borrowed(frame, *datapath_id, outbuf, ctx, table, &mut sample)?
        };

        if let Some(mut s) = sample {
            s.reply_len = reply_len as u32;
            *sample_pending = Some(s);
        }
        *processed += 1;
        ctx.counters.packets_in.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        ctx.counters.flow_mods.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        return Ok(FrameOutcome::Handled);
    }

    // Control plane: full owned decode, rarity makes it cheap.
    let msg = ofwire::decode_frame(frame).map_err(CloseReason::Wire)?;
    match (&msg, *phase) {
        (OfMessage::Hello(h), Phase::ExpectHello) => {
            queue_control_msg(outbuf, &OfMessage::Hello(ofwire::Hello { xid: h.xid }), ctx.pool);
            queue_control_msg(
                outbuf,
                &OfMessage::FeaturesRequest(ofwire::FeaturesRequest { xid: 0 }),
                ctx.pool,
            );
            *phase = Phase::FeaturesRequestSent;
            Ok(FrameOutcome::Handled)
        }
        (OfMessage::FeaturesReply(fr), Phase::FeaturesRequestSent) => {
            *datapath_id = fr.datapath_id;
            *phase = Phase::Ready;
            Ok(FrameOutcome::NewlyReady)
        }
        (OfMessage::EchoRequest(e), _) => {
            queue_control_msg(
                outbuf,
                &OfMessage::EchoReply(Echo { xid: e.xid, payload: e.payload.clone() }),
                ctx.pool,
            );
            Ok(FrameOutcome::Handled)
        }
        (OfMessage::EchoReply(_), _) => Ok(FrameOutcome::Handled),
        (OfMessage::Error(e), _) => {
            log::warn!("peer error message: type {} code {}", e.err_type, e.code);
            Ok(FrameOutcome::Handled)
        }
        // Messages that only make sense in the other direction, or types
        // outside the modeled subset (stats, barriers, vendor): ignore.
        (OfMessage::FlowMod(_) | OfMessage::PacketOut(_) | OfMessage::Unknown(_), Phase::Ready) => {
            Ok(FrameOutcome::Handled)
        }
        (OfMessage::Unknown(_), _) => Ok(FrameOutcome::Handled),
        // Everything else is a phase violation: hello twice, features reply
        // we never asked for, a packet-in before the handshake finished.
        _ => Err(CloseReason::OutOfPhase { msg: msg.msg_type(), phase: *phase }),
    }
}

/// Packet-in hot path, pooled strategy: borrow the frame where the socket
/// read put it, decide, encode the reply in place. No allocation.
pub(crate) fn process_packet_in_borrowed(
    frame: &[u8],
    datapath_id: u64,
    outbuf: &mut IoBuffer,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
    sample: &mut Option<PhaseSample>,
) -> Result<usize, CloseReason> {
    let t0 = sample.as_ref().map(|_| Instant::now());
    let view = ofwire::PacketInView::parse(frame).map_err(CloseReason::Wire)?;
    let (src, dst) = (view.src_mac(), view.dst_mac());
    let t1 = t0.map(|_| Instant::now());

    let decision = handle_packet_in(table, datapath_id, view.in_port, src, dst);
    let out_port = match decision {
        Decision::Forward(p) => p,
        Decision::Flood => OFPP_FLOOD,
    };
    let t2 = t1.map(|_| Instant::now());

    ensure_out_space(outbuf, ofwire::LEARNED_FLOW_MOD_LEN, ctx.pool);
    let n = ofwire::encode_learned_flow_mod(
        outbuf.writable(),
        view.xid,
        view.buffer_id,
        view.in_port,
        src,
        dst,
        out_port,
    )
    .expect("space ensured");
    outbuf.advance_write(n);

    if let (Some(s), Some(t0), Some(t1), Some(t2)) = (sample.as_mut(), t0, t1, t2) {
        s.decode_ns = (t1 - t0).as_nanos() as u64;
        s.app_ns = (t2 - t1).as_nanos() as u64;
        s.encode_ns = t2.elapsed().as_nanos() as u64;
    }
    Ok(n)
}

/// Packet-in hot path, per-packet-object strategy: materialize an owned
/// message, an owned reply, and copy the reply out — each step allocating or
/// copying, all of it charged to the stats this strategy exists to expose.
pub(crate) fn process_packet_in_owned(
    frame: &[u8],
    datapath_id: u64,
    outbuf: &mut IoBuffer,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
    sample: &mut Option<PhaseSample>,
) -> Result<usize, CloseReason> {
    let t0 = sample.as_ref().map(|_| Instant::now());
    let msg = ofwire::decode_frame(frame).map_err(CloseReason::Wire)?;
    let pi = match msg {
        OfMessage::PacketIn(pi) => pi,
        _ => unreachable!("dispatched on the packet-in type byte"),
    };
    ctx.pool.record_external_alloc(1); // the owned frame copy
    let (src, dst) = (pi.src_mac(), pi.dst_mac());
    let t1 = t0.map(|_| Instant::now());

    let decision = handle_packet_in(table, datapath_id, pi.in_port, src, dst);
    let out_port = match decision {
        Decision::Forward(p) => p,
        Decision::Flood => OFPP_FLOOD,
    };
    let t2 = t1.map(|_| Instant::now());

    let fm = ofwire::FlowMod::learned(pi.xid, pi.buffer_id, pi.in_port, src, dst, out_port);
    ctx.pool.record_external_alloc(1); // the reply object's action list
    let bytes = ofwire::encode_to_vec(&OfMessage::FlowMod(fm));
    ctx.pool.record_external_alloc(1); // the serialized reply
    ensure_out_space(outbuf, bytes.len(), ctx.pool);
    outbuf.writable()[..bytes.len()].copy_from_slice(&bytes);
    outbuf.advance_write(bytes.len());
    ctx.pool.record_external_copy(bytes.len() as u64);

    if let (Some(s), Some(t0), Some(t1), Some(t2)) = (sample.as_mut(), t0, t1, t2) {
        s.decode_ns = (t1 - t0).as_nanos() as u64;
        s.app_ns = (t2 - t1).as_nanos() as u64;
        s.encode_ns = t2.elapsed().as_nanos() as u64;
    }
    Ok(bytes.len())
}

/// Consumes every complete frame currently in `inbuf` (respecting the output
/// backlog limit), processing each inline. Returns the number of frames
/// handled or the reason to close.
pub fn process_frames(
    conn: &mut Conn,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
) -> Result<usize, CloseReason> {
    let mut handled = 0usize;
    loop {
        if conn.out_backlog() > OUT_BACKLOG_LIMIT {
            break;
        }
        let Conn { inbuf, outbuf, phase, datapath_id, processed, sample_pending, .. } = conn;
        let readable = inbuf.readable();
        let len = match ofwire::frame_len(readable).map_err(CloseReason::Wire)? {
            Some(len) => len,
            None => break, // not even a header yet
        };
        if len > readable.len() {
            // Partial frame. If it cannot ever fit, grow the input buffer now
            // (frame lengths are u16, so this is bounded at 64 KiB).
            if len > inbuf.capacity() {
                let grown = pool_grow_in(ctx.pool, std::mem::replace(inbuf, IoBuffer::empty()), len);
                *inbuf = grown;
            }
            break;
        }
        let frame = &inbuf.readable()[..len];
        handle_frame(frame, phase, datapath_id, outbuf, processed, sample_pending, ctx, table)?;
        inbuf.advance_read(len);
        handled += 1;
    }
    if conn.inbuf.is_empty() {
        conn.inbuf.clear(); // free cursor reset, avoids a future compaction
    }
    Ok(handled)
}

fn pool_grow_in(pool: &mut BufferPool, buf: IoBuffer, needed: usize) -> IoBuffer {
    pool.grow_exclusive(buf, needed.next_power_of_two())
}

/// Reads once from the socket into `inbuf`, compacting/growing as needed.
/// Returns bytes read; `Ok(None)` means WouldBlock (no data right now).
pub fn read_some(conn: &mut Conn, ctx: &mut InlineCtx<'_>) -> Result<Option<usize>, CloseReason> {
    if conn.inbuf.writable().is_empty() {
        ctx.pool.compact(&mut conn.inbuf);
        if conn.inbuf.writable().is_empty() {
            // Buffer completely full of unprocessed input: either a huge
            // partial frame (process_frames grows for that) or backpressure
            // is holding frames in place. Either way, do not read more.
            return Ok(None);
        }
    }
    loop {
        match conn.stream.read(conn.inbuf.writable()) {
            Ok(0) => return Err(CloseReason::PeerClosed),
            Ok(n) => {
                conn.inbuf.advance_write(n);
                return Ok(Some(n));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(None),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(CloseReason::IoError(e)),
        }
    }
}

/// Writes as much parked output as the socket will take, committing any
/// pending phase sample against this flush. Returns bytes written;
/// `want_write` is left set when the socket blocked before draining.
pub fn flush_conn(conn: &mut Conn, ctx: &mut InlineCtx<'_>) -> Result<usize, CloseReason> {
    if conn.outbuf.is_empty() && conn.out_queue.is_empty() {
        conn.want_write = false;
        return Ok(0);
    }
    let timed = conn.sample_pending.is_some();
    let started = if timed { Some(Instant::now()) } else { None };
    let mut wrote = 0usize;
    let mut blocked = false;

    'drain: loop {
        // outbuf first (in-order), then queued reply buffers.
        while !conn.outbuf.is_empty() {
            match conn.stream.write(conn.outbuf.readable()) {
                Ok(0) => return Err(CloseReason::PeerClosed),
                Ok(n) => {
                    conn.outbuf.advance_read(n);
                    wrote += n;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    blocked = true;
                    break 'drain;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(CloseReason::IoError(e)),
            }
        }
        conn.outbuf.clear();
        match conn.out_queue.front_mut() {
            None => break 'drain,
            Some(next) => {
                while !next.is_empty() {
                    match conn.stream.write(next.readable()) {
                        Ok(0) => return Err(CloseReason::PeerClosed),
                        Ok(n) => {
                            next.advance_read(n);
                            conn.queued_out_bytes -= n;
                            wrote += n;
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            blocked = true;
                            break 'drain;
                        }
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => return Err(CloseReason::IoError(e)),
                    }
                }
                let drained = conn.out_queue.pop_front().expect("front exists");
                ctx.pool.release(drained);
            }
        }
    }

    conn.want_write = blocked;
    if wrote > 0 {
        if let (Some(sample), Some(t0)) = (conn.sample_pending.take(), started) {
            // The flush that carried (or began carrying) the sampled reply:
            // charge the packet its pro-rata slice of the syscall time.
            sample.commit(ctx.counters, t0.elapsed().as_nanos() as u64, wrote as u64);
        }
    }
    Ok(wrote)
}

/// Runs a ready connection to quiescence: read, process every frame inline,
/// flush — repeated until the socket has nothing more for us in either
/// direction. This is the whole per-event life of a connection under the
/// run-to-completion and shared-pool models.
pub fn drive_inline(
    conn: &mut Conn,
    ctx: &mut InlineCtx<'_>,
    table: &mut TableView<'_>,
) -> DriveOutcome {
    loop {
        let mut progress = 0usize;
        loop {
            match read_some(conn, ctx) {
                Ok(Some(n)) => progress += n,
                Ok(None) => break,
                Err(reason) => return DriveOutcome::Close(reason),
            }
            // Process between reads so a saturating peer cannot wedge us
            // against a full input buffer.
            match process_frames(conn, ctx, table) {
                Ok(n) => progress += n,
                Err(reason) => return DriveOutcome::Close(reason),
            }
            match flush_conn(conn, ctx) {
                Ok(n) => progress += n,
                Err(reason) => return DriveOutcome::Close(reason),
            }
        }
        // One more pass for frames parked by backpressure that the flush may
        // have just unblocked, and for replies queued after the last flush.
        match process_frames(conn, ctx, table) {
            Ok(n) => progress += n,
            Err(reason) => return DriveOutcome::Close(reason),
        }
        match flush_conn(conn, ctx) {
            Ok(n) => progress += n,
            Err(reason) => return DriveOutcome::Close(reason),
        }
        if progress == 0 {
            return DriveOutcome::Continue;
        }
    }
}

/// Drives only the handshake: consumes control frames until the connection
/// becomes READY or stalls. Packet-ins that arrive in the same burst as the
/// FEATURES_REPLY stay in `inbuf` — they belong to whichever thread the
/// connection is assigned to next.
///
/// `Ok(true)` = ready; `Ok(false)` = still waiting for bytes.
pub fn drive_handshake(conn: &mut Conn, ctx: &mut InlineCtx<'_>) -> Result<bool, CloseReason> {
    loop {
        let mut progress = 0usize;
        // Consume complete control frames already buffered.
        loop {
            if conn.phase == Phase::Ready {
                flush_conn(conn, ctx)?;
                return Ok(true);
            }
            let Conn { inbuf, outbuf, phase, datapath_id, processed, sample_pending, .. } = conn;
            let readable = inbuf.readable();
            let len = match ofwire::frame_len(readable).map_err(CloseReason::Wire)? {
                Some(len) if len <= readable.len() => len,
                Some(len) => {
                    if len > inbuf.capacity() {
                        let grown =
                            pool_grow_in(ctx.pool, std::mem::replace(inbuf, IoBuffer::empty()), len);
                        *inbuf = grown;
                    }
                    break;
                }
                None => break,
            };
            let frame = &inbuf.readable()[..len];
            let mut no_table = TableView::Shared(handshake_table());
            handle_frame(
                frame,
                phase,
                datapath_id,
                outbuf,
                processed,
                sample_pending,
                ctx,
                &mut no_table,
            )?;
            inbuf.advance_read(len);
            progress += 1;
        }
        progress += flush_conn(conn, ctx)?;
        if read_some(conn, ctx)?.is_none() && progress == 0 {
            return Ok(false);
        }
    }
}

/// Placeholder table the handshake driver lends to `handle_frame`. It is
/// never written: a packet-in before READY closes the connection, and the
/// driver stops consuming frames at READY.
fn handshake_table() -> &'static crate::learnswitch::SharedTable {
    use std::sync::OnceLock;
    static TABLE: OnceLock<crate::learnswitch::SharedTable> = OnceLock::new();
    TABLE.get_or_init(|| crate::learnswitch::SharedTable::new(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bufferpool::BufferStrategy;
    use crate::learnswitch::SharedTable;
    use crate::ofwire::{probe_packet_in, OfHeader};
    use std::net::{TcpListener, TcpStream as StdTcpStream};
    use std::time::Duration;

    /// Loopback pair: nonblocking mio stream for the engine side, blocking
    /// std stream (with read timeout) for the scripted peer.
    fn socket_pair() -> (TcpStream, StdTcpStream) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let peer = StdTcpStream::connect(addr).unwrap();
        peer.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        peer.set_nodelay(true).unwrap();
        let (engine_side, _) = listener.accept().unwrap();
        engine_side.set_nonblocking(true).unwrap();
        engine_side.set_nodelay(true).unwrap();
        (TcpStream::from_std(engine_side), peer)
    }

    fn test_ctx<'a>(pool: &'a mut BufferPool, counters: &'a WorkerCounters) -> InlineCtx<'a> {
        InlineCtx { pool, counters, sample_mask: u64::MAX >> 1 }
    }

    fn new_conn(stream: TcpStream, pool: &mut BufferPool) -> Conn {
        let peer = "127.0.0.1:1".parse().unwrap();
        Conn::new(stream, peer, pool)
    }

    fn read_frame(peer: &mut StdTcpStream) -> Vec<u8> {
        let mut header = [0u8; 8];
        peer.read_exact(&mut header).unwrap();
        let len = u16::from_be_bytes([header[2], header[3]]) as usize;
        let mut frame = header.to_vec();
        frame.resize(len, 0);
        peer.read_exact(&mut frame[8..]).unwrap();
        frame
    }

    /// Drives the handshake until the connection reaches `want` (bytes from
    /// the peer can lag the nonblocking reads slightly).
    fn pump_to_phase(conn: &mut Conn, ctx: &mut InlineCtx<'_>, want: Phase) {
        for _ in 0..5000 {
            drive_handshake(conn, ctx).unwrap();
            if conn.phase == want {
                return;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        panic!("handshake never reached {want:?} (stuck at {:?})", conn.phase);
    }

    /// Drives the handshake until it fails, returning the failure.
    fn pump_to_error(conn: &mut Conn, ctx: &mut InlineCtx<'_>) -> CloseReason {
        for _ in 0..5000 {
            if let Err(reason) = drive_handshake(conn, ctx) {
                return reason;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        panic!("handshake never failed");
    }

    fn hello_bytes(xid: u32) -> [u8; 8] {
        OfHeader::new(MsgType::Hello, 8, xid).serialize()
    }

    fn features_reply_bytes(xid: u32, dpid: u64) -> Vec<u8> {
        ofwire::encode_to_vec(&OfMessage::FeaturesReply(ofwire::FeaturesReply {
            xid,
            datapath_id: dpid,
            n_buffers: 256,
            n_tables: 2,
            capabilities: 0,
            actions: 0,
            ports: Vec::new(),
        }))
    }

    #[test]
    fn handshake_exchanges_hello_then_features_and_learns_dpid() {
        let (stream, mut peer) = socket_pair();
        let mut pool = BufferPool::new(BufferStrategy::default());
        let counters = WorkerCounters::default();
        let mut conn = new_conn(stream, &mut pool);
        let mut ctx = test_ctx(&mut pool, &counters);

        peer.write_all(&hello_bytes(7)).unwrap();
        pump_to_phase(&mut conn, &mut ctx, Phase::FeaturesRequestSent);

        let our_hello = read_frame(&mut peer);
        assert_eq!(our_hello[1], type_code::HELLO);
        let our_features_req = read_frame(&mut peer);
        assert_eq!(our_features_req[1], type_code::FEATURES_REQUEST);
        let req_xid = u32::from_be_bytes(our_features_req[4..8].try_into().unwrap());

        peer.write_all(&features_reply_bytes(req_xid, 0xfeed)).unwrap();
        pump_to_phase(&mut conn, &mut ctx, Phase::Ready);
        assert_eq!(conn.datapath_id, 0xfeed);
    }

    #[test]
    fn packet_in_before_hello_is_a_protocol_error() {
        let (stream, mut peer) = socket_pair();
        let mut pool = BufferPool::new(BufferStrategy::default());
        let counters = WorkerCounters::default();
        let mut conn = new_conn(stream, &mut pool);
        let mut ctx = test_ctx(&mut pool, &counters);

        peer.write_all(&probe_packet_in(1, 1, 1, 0xa, 0xb)).unwrap();
        let err = pump_to_error(&mut conn, &mut ctx);
        assert!(err.is_protocol_error());
        assert!(matches!(
            err,
            CloseReason::OutOfPhase { msg: MsgType::PacketIn, phase: Phase::ExpectHello }
        ));
    }

    #[test]
    fn malformed_length_is_a_protocol_error_not_a_panic() {
        let (stream, mut peer) = socket_pair();
        let mut pool = BufferPool::new(BufferStrategy::default());
        let counters = WorkerCounters::default();
        let mut conn = new_conn(stream, &mut pool);
        let mut ctx = test_ctx(&mut pool, &counters);

        // length field = 3 (< header size): unrecoverable framing breakage.
        peer.write_all(&[1, 0, 0, 3, 0, 0, 0, 0]).unwrap();
        let err = pump_to_error(&mut conn, &mut ctx);
        assert!(matches!(err, CloseReason::Wire(WireError::MalformedLength { length: 3 })));
    }

    fn handshaken_conn() -> (Conn, BufferPool, WorkerCounters, StdTcpStream) {
        let (stream, mut peer) = socket_pair();
        let mut pool = BufferPool::new(BufferStrategy::default());
        let counters = WorkerCounters::default();
        let mut conn = new_conn(stream, &mut pool);
        {
            let mut ctx = test_ctx(&mut pool, &counters);
            peer.write_all(&hello_bytes(1)).unwrap();
            pump_to_phase(&mut conn, &mut ctx, Phase::FeaturesRequestSent);
            read_frame(&mut peer); // hello
            let req = read_frame(&mut peer); // features request
            let req_xid = u32::from_be_bytes(req[4..8].try_into().unwrap());
            peer.write_all(&features_reply_bytes(req_xid, 42)).unwrap();
            pump_to_phase(&mut conn, &mut ctx, Phase::Ready);
        }
        (conn, pool, counters, peer)
    }

    /// Drives until the worker-side packet counter reaches `target` and all
    /// replies are flushed.
    fn drive_until_processed(
        conn: &mut Conn,
        ctx: &mut InlineCtx<'_>,
        table: &mut TableView<'_>,
        target: u64,
    ) {
        for _ in 0..5000 {
            match drive_inline(conn, ctx, table) {
                DriveOutcome::Continue => {}
                DriveOutcome::Close(r) => panic!("unexpected close: {r:?}"),
            }
            if conn.processed >= target && conn.out_backlog() == 0 {
                return;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        panic!("never processed {target} packets (at {})", conn.processed);
    }

    #[test]
    fn ready_conn_answers_probes_with_learned_flow_mods() {
        let (mut conn, mut pool, counters, mut peer) = handshaken_conn();
        let table = SharedTable::new(4);

        // First probe: A → B with B unknown, expect a flood flow-mod.
        peer.write_all(&probe_packet_in(0x10, 900, 3, 0xa, 0xb)).unwrap();
        {
            let mut ctx = test_ctx(&mut pool, &counters);
            let mut view = TableView::Shared(&table);
            drive_until_processed(&mut conn, &mut ctx, &mut view, 1);
        }
        let reply = read_frame(&mut peer);
        assert_eq!(reply.len(), ofwire::LEARNED_FLOW_MOD_LEN);
        assert_eq!(reply[1], type_code::FLOW_MOD);
        assert_eq!(u32::from_be_bytes(reply[4..8].try_into().unwrap()), 0x10);
        assert_eq!(u32::from_be_bytes(reply[64..68].try_into().unwrap()), 900);
        let out_port = u16::from_be_bytes(reply[76..78].try_into().unwrap());
        assert_eq!(out_port, OFPP_FLOOD);

        // Reverse probe: B → A, and A was just learned on port 3.
        peer.write_all(&probe_packet_in(0x11, 901, 9, 0xb, 0xa)).unwrap();
        {
            let mut ctx = test_ctx(&mut pool, &counters);
            let mut view = TableView::Shared(&table);
            drive_until_processed(&mut conn, &mut ctx, &mut view, 2);
        }
        let reply = read_frame(&mut peer);
        let out_port = u16::from_be_bytes(reply[76..78].try_into().unwrap());
        assert_eq!(out_port, 3);

        assert_eq!(counters.packets_in.load(std::sync::atomic::Ordering::Relaxed), 2);
        assert_eq!(counters.flow_mods.load(std::sync::atomic::Ordering::Relaxed), 2);
    }

    #[test]
    fn echo_request_is_answered_in_ready_phase() {
        let (mut conn, mut pool, counters, mut peer) = handshaken_conn();
        let table = SharedTable::new(4);
        let echo = ofwire::encode_to_vec(&OfMessage::EchoRequest(Echo {
            xid: 77,
            payload: vec![1, 2, 3],
        }));
        peer.write_all(&echo).unwrap();
        let mut ctx = test_ctx(&mut pool, &counters);
        let mut view = TableView::Shared(&table);
        // Drive until reply bytes show up on the peer side (echoes do not
        // advance the packet counter, so peek the wire itself).
        peer.set_nonblocking(true).unwrap();
        let mut probe_byte = [0u8; 1];
        for _ in 0..5000 {
            match drive_inline(&mut conn, &mut ctx, &mut view) {
                DriveOutcome::Continue => {}
                DriveOutcome::Close(r) => panic!("unexpected close: {r:?}"),
            }
            if matches!(peer.peek(&mut probe_byte), Ok(n) if n > 0) {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        peer.set_nonblocking(false).unwrap();
        let reply = read_frame(&mut peer);
        assert_eq!(reply[1], type_code::ECHO_REPLY);
        assert_eq!(u32::from_be_bytes(reply[4..8].try_into().unwrap()), 77);
        assert_eq!(&reply[8..], &[1, 2, 3]);
    }

    #[test]
    fn buffer_strategies_differ_in_allocation_profile() {
        // Same probe burst processed under both strategies; the object mode
        // must allocate per packet, the pooled mode must not.
        let per_packet_allocs = allocs_for_strategy(BufferStrategy::per_packet());
        let pooled_allocs = allocs_for_strategy(BufferStrategy::default());
        assert!(
            per_packet_allocs >= 100,
            "object mode should allocate at least once per packet, got {per_packet_allocs}"
        );
        // Pooled: connection buffers only, nothing per packet.
        assert!(
            pooled_allocs <= 8,
            "pooled mode should not allocate per packet, got {pooled_allocs}"
        );
    }

    fn allocs_for_strategy(strategy: BufferStrategy) -> u64 {
        let (stream, mut peer) = socket_pair();
        let mut pool = BufferPool::new(strategy);
        let baseline = pool.stats().allocations;
        let counters = WorkerCounters::default();
        let mut conn = new_conn(stream, &mut pool);
        let table = SharedTable::new(4);
        {
            let mut ctx = test_ctx(&mut pool, &counters);
            peer.write_all(&hello_bytes(1)).unwrap();
            pump_to_phase(&mut conn, &mut ctx, Phase::FeaturesRequestSent);
            read_frame(&mut peer);
            let req = read_frame(&mut peer);
            let req_xid = u32::from_be_bytes(req[4..8].try_into().unwrap());
            peer.write_all(&features_reply_bytes(req_xid, 1)).unwrap();
            pump_to_phase(&mut conn, &mut ctx, Phase::Ready);
        }
        let reader = std::thread::spawn(move || {
            let mut got = 0usize;
            while got < 100 {
                read_frame(&mut peer);
                got += 1;
            }
            peer
        });
        let mut sent = 0u32;
        let mut ctx = test_ctx(&mut pool, &counters);
        let mut view = TableView::Shared(&table);
        while sent < 100 {
            let probe = probe_packet_in(sent, sent, 1, u64::from(sent), u64::from(sent) + 1);
            // Blocking write from the peer side is emulated by writing from
            // this side's test harness... the peer writes, we drive.
            conn_write_probe(&mut conn, &probe);
            sent += 1;
            match drive_inline(&mut conn, &mut ctx, &mut view) {
                DriveOutcome::Continue => {}
                DriveOutcome::Close(r) => panic!("close: {r:?}"),
            }
        }
        // Final drain until every reply is out the door.
        for _ in 0..5000 {
            match drive_inline(&mut conn, &mut ctx, &mut view) {
                DriveOutcome::Continue => {}
                DriveOutcome::Close(r) => panic!("close: {r:?}"),
            }
            if conn.out_backlog() == 0 {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        drop(reader.join().unwrap());
        pool.stats().allocations - baseline
    }

    /// Injects a probe as if it had been read off the socket (avoids a
    /// second writer thread in the allocation test).
    fn conn_write_probe(conn: &mut Conn, probe: &[u8]) {
        let w = conn.inbuf.writable();
        if w.len() < probe.len() {
            // Test-only: the buffer is large enough for this burst size.
            panic!("test inbuf too small");
        }
        w[..probe.len()].copy_from_slice(probe);
        conn.inbuf.advance_write(probe.len());
    }
}
