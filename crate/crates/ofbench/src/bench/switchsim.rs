//! Switch emulation: N OpenFlow-1.0 switches multiplexed over a small pool
//! of event-loop threads, generating 82-byte packet-in probes and counting
//! the controller's responses.
//!
//! Each emulator thread owns a disjoint subset of the switch connections
//! end-to-end (its own poller, its own buffers); threads share nothing but
//! the per-switch counter blocks the coordinator reads. That keeps the load
//! generator scalable without any cross-thread coordination on the hot path —
//! the classic single-threaded-benchmark bottleneck is designed out rather
//! than worked around by launching multiple processes.
//!
//! Probe discipline:
//! * latency mode — at most one outstanding probe per switch; the next probe
//!   is sent only when a response arrives, and the round-trip time is
//!   recorded.
//! * throughput mode — the write path is kept saturated subject to a bounded
//!   in-flight byte window (default 64 KiB), so backpressure from the
//!   controller is observable instead of being absorbed by unbounded queues.

use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mio::net::TcpStream;
use mio::{Events, Interest, Poll, Token};

use crate::ofwire::{
    self, encode_to_vec, frame_len, probe_packet_in, raw_barrier_reply, raw_get_config_reply,
    type_code, ErrorMsg, FeaturesReply, OfMessage, PROBE_PACKET_IN_LEN,
};

use super::{BenchConfig, BenchMode};

/// Upper bound on recorded latency samples per switch between coordinator
/// drains, so a long loop on a fast loopback cannot grow sample vectors
/// without bound. Responses past the cap still count; only the timestamp is
/// dropped.
const LATENCY_SAMPLE_CAP: usize = 1 << 20;

/// Deterministic per-switch MAC generation. The switch id occupies the high
/// 16 bits of the 48-bit address, so two switches can never emit equal MACs
/// and the connectivity and heterogeneity axes stay independent. Within a
/// switch, the source cycles through `unique_macs` values and the
/// destination is the *next* source, so once the table is warm the
/// controller's decision is a learned forward rather than a flood.
pub fn gen_macs(switch_id: u16, seq: u64, unique_macs: u64) -> (u64, u64) {
    debug_assert!(unique_macs >= 2);
    let base = (switch_id as u64) << 32;
    let src = base | (seq % unique_macs);
    let dst = base | ((seq + 1) % unique_macs);
    (src, dst)
}

/// Cumulative counters for one emulated switch. The emulator thread writes
/// with relaxed ordering; the coordinator reads totals and takes deltas
/// around loop windows, so absolute publication order does not matter.
#[derive(Debug, Default)]
pub struct SwitchStats {
    pub probes_sent: AtomicU64,
    /// Counted responses: flow-mods plus non-LLDP packet-outs.
    pub responses: AtomicU64,
    pub flow_mods: AtomicU64,
    pub packet_outs: AtomicU64,
    pub lldp_packet_outs: AtomicU64,
    pub flow_mod_bytes: AtomicU64,
    pub packet_out_bytes: AtomicU64,
    /// OFPT_ERROR frames received from the controller.
    pub errors: AtomicU64,
    /// Any other frame type (set-config, stats, port-status, ...).
    pub other: AtomicU64,
    /// Times this switch's connection dropped and was re-established.
    pub reconnects: AtomicU64,
    /// Handshake completed and probes are (or are about to start) flowing.
    pub ready: AtomicBool,
    /// Round-trip samples in microseconds (latency mode only).
    pub latencies_us: Mutex<Vec<u64>>,
    /// Response log (xid, output port) kept only when the run collects
    /// responses for replay comparison.
    pub response_log: Mutex<Vec<(u32, u16)>>,
}

impl SwitchStats {
    /// Takes all accumulated latency samples, leaving the vector empty.
    pub fn take_latencies(&self) -> Vec<u64> {
        std::mem::take(&mut *self.latencies_us.lock().unwrap())
    }

    pub fn take_response_log(&self) -> Vec<(u32, u16)> {
        std::mem::take(&mut *self.response_log.lock().unwrap())
    }
}

/// Pure send-window check, factored out so the discipline is testable
/// without sockets: may a switch with `in_flight` unanswered probes send
/// another one?
pub fn window_allows(mode: BenchMode, in_flight: u64, window_bytes: usize) -> bool {
    match mode {
        BenchMode::Latency => in_flight == 0,
        BenchMode::Throughput => {
            (in_flight as usize + 1) * PROBE_PACKET_IN_LEN <= window_bytes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SwState {
    /// TCP connect in flight (nonblocking connect not yet confirmed).
    Connecting,
    /// Connected, our hello sent, waiting for the features request.
    Handshake,
    /// Handshake done; probes start once the configured delay elapses.
    Delay(Instant),
    /// Generating probes under the configured discipline.
    Running,
}

struct SwConn {
    stream: TcpStream,
    state: SwState,
    /// Global switch index (stable across reconnects).
    index: usize,
    inbuf: Vec<u8>,
    /// Bytes of `inbuf` already consumed byframing.
    consumed: usize,
    outbuf: Vec<u8>,
    out_pos: usize,
    /// Probe sequence number; also the xid and the MAC cycle position.
    seq: u64,
    /// Probes sent minus responses received *on this connection* — resets on
    /// reconnect, unlike the cumulative stats, because probes lost with a
    /// dead connection will never be answered.
    sent_local: u64,
    responded_local: u64,
    /// Send timestamp of the outstanding probe (latency mode).
    last_send: Option<Instant>,
    stats: Arc<SwitchStats>,
}

impl SwConn {
    fn in_flight(&self) -> u64 {
        self.sent_local.saturating_sub(self.responded_local)
    }
}

/// Shared emulator-wide state visible to the coordinator.
struct EmuShared {
    cfg: BenchConfig,
    addr: SocketAddr,
    stop: AtomicBool,
    /// Connection-loss events; a loop during which this advances is invalid.
    lost: AtomicU64,
    ready_count: AtomicUsize,
}

/// Running switch emulator: one thread per configured emulator worker, each
/// owning `switches / worker_threads` (±1) connections.
pub struct Emulator {
    shared: Arc<EmuShared>,
    pub stats: Vec<Arc<SwitchStats>>,
    threads: Vec<JoinHandle<()>>,
}

/// Snapshot of summed per-switch counters, used by the coordinator to delta
/// loop windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub probes_sent: u64,
    pub responses: u64,
    pub flow_mods: u64,
    pub packet_outs: u64,
    pub lldp_packet_outs: u64,
    pub flow_mod_bytes: u64,
    pub packet_out_bytes: u64,
    pub errors: u64,
    pub other: u64,
    pub reconnects: u64,
}

impl Emulator {
    /// Connects `cfg.switches` emulated switches to `cfg.controller` and
    /// starts the emulator threads. Connections come up asynchronously; use
    /// [`Emulator::wait_ready`] before timing anything.
    pub fn start(cfg: &BenchConfig) -> io::Result<Emulator> {
        let addr: SocketAddr = cfg
            .controller
            .parse()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, format!("controller address: {e}")))?;
        let stats: Vec<Arc<SwitchStats>> =
            (0..cfg.switches).map(|_| Arc::new(SwitchStats::default())).collect();
        let shared = Arc::new(EmuShared {
            cfg: cfg.clone(),
            addr,
            stop: AtomicBool::new(false),
            lost: AtomicU64::new(0),
            ready_count: AtomicUsize::new(0),
        });
        let threads = (0..cfg.worker_threads.min(cfg.switches).max(1))
            .map(|t| {
                let shared = Arc::clone(&shared);
                let stats = stats.clone();
                std::thread::Builder::new()
                    .name(format!("swsim-{t}"))
                    .spawn(move || emu_thread(t, shared, stats))
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(Emulator { shared, stats, threads })
    }

    /// Waits until every switch has completed its handshake.
    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.shared.ready_count.load(Ordering::Acquire) < self.shared.cfg.switches {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        true
    }

    /// Sums the cumulative per-switch counters.
    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for s in &self.stats {
            t.probes_sent += s.probes_sent.load(Ordering::Relaxed);
            t.responses += s.responses.load(Ordering::Relaxed);
            t.flow_mods += s.flow_mods.load(Ordering::Relaxed);
            t.packet_outs += s.packet_outs.load(Ordering::Relaxed);
            t.lldp_packet_outs += s.lldp_packet_outs.load(Ordering::Relaxed);
            t.flow_mod_bytes += s.flow_mod_bytes.load(Ordering::Relaxed);
            t.packet_out_bytes += s.packet_out_bytes.load(Ordering::Relaxed);
            t.errors += s.errors.load(Ordering::Relaxed);
            t.other += s.other.load(Ordering::Relaxed);
            t.reconnects += s.reconnects.load(Ordering::Relaxed);
        }
        t
    }

    /// Connection-loss events so far.
    pub fn lost_connections(&self) -> u64 {
        self.shared.lost.load(Ordering::Relaxed)
    }

    /// Stops probe generation, closes all connections, and joins the
    /// emulator threads.
    pub fn stop(self) {
        self.shared.stop.store(true, Ordering::Release);
        for t in self.threads {
            if let Err(p) = t.join() {
                std::panic::resume_unwind(p);
            }
        }
    }
}

const POLL_TICK: Duration = Duration::from_millis(5);

fn emu_thread(thread_index: usize, shared: Arc<EmuShared>, all_stats: Vec<Arc<SwitchStats>>) {
    let mut poll = Poll::new().expect("emu poll");
    let mut events = Events::with_capacity(256);
    let thread_count = shared.cfg.worker_threads.min(shared.cfg.switches).max(1);

    // Round-robin ownership: switch i belongs to thread i % threads.
    let mut conns: Vec<SwConn> = Vec::new();
    for index in (thread_index..shared.cfg.switches).step_by(thread_count) {
        match open_conn(&shared, index, Arc::clone(&all_stats[index])) {
            Ok(mut conn) => {
                let local = conns.len();
                poll.registry()
                    .register(&mut conn.stream, Token(local), Interest::READABLE | Interest::WRITABLE)
                    .expect("register switch conn");
                conns.push(conn);
            }
            Err(e) => {
                // Controller unreachable at start-up: record the loss; the
                // retry path below keeps trying until stop.
                log::warn!("switch {index}: connect failed: {e}");
                shared.lost.fetch_add(1, Ordering::Relaxed);
                let mut conn = SwConn {
                    stream: match TcpStream::connect(shared.addr) {
                        Ok(s) => s,
                        Err(_) => {
                            // Even initiating a connect failed; park a
                            // placeholder and let the reconnect path retry.
                            std::thread::sleep(Duration::from_millis(50));
                            TcpStream::connect(shared.addr).expect("connect retry")
                        }
                    },
                    state: SwState::Connecting,
                    index,
                    inbuf: Vec::with_capacity(16 * 1024),
                    consumed: 0,
                    outbuf: Vec::with_capacity(16 * 1024),
                    out_pos: 0,
                    seq: 0,
                    sent_local: 0,
                    responded_local: 0,
                    last_send: None,
                    stats: Arc::clone(&all_stats[index]),
                };
                let local = conns.len();
                poll.registry()
                    .register(&mut conn.stream, Token(local), Interest::READABLE | Interest::WRITABLE)
                    .expect("register switch conn");
                conns.push(conn);
            }
        }
    }

    while !shared.stop.load(Ordering::Acquire) {
        poll.poll(&mut events, Some(POLL_TICK)).expect("emu poll");
        for ev in events.iter() {
            let local = ev.token().0;
            if local >= conns.len() {
                continue;
            }
            if drive(&mut conns[local], &shared).is_err() {
                reconnect(&mut conns[local], local, &poll, &shared);
            }
        }
        // Tick work independent of socket events: delay expiry and probe
        // top-up (the window may have been closed by backpressure earlier).
        let now = Instant::now();
        for (local, conn) in conns.iter_mut().enumerate() {
            if let SwState::Delay(until) = conn.state {
                if now >= until {
                    conn.state = SwState::Running;
                }
            }
            if conn.state == SwState::Running && drive(conn, &shared).is_err() {
                reconnect(conn, local, &poll, &shared);
            }
        }
    }
}

fn open_conn(shared: &EmuShared, index: usize, stats: Arc<SwitchStats>) -> io::Result<SwConn> {
    let stream = TcpStream::connect(shared.addr)?;
    Ok(SwConn {
        stream,
        state: SwState::Connecting,
        index,
        inbuf: Vec::with_capacity(16 * 1024),
        consumed: 0,
        outbuf: Vec::with_capacity(16 * 1024),
        out_pos: 0,
        seq: 0,
        sent_local: 0,
        responded_local: 0,
        last_send: None,
        stats,
    })
}

/// Replaces a dead connection with a fresh one registered under the same
/// token. Cumulative counters survive; the in-flight window resets because
/// unanswered probes died with the socket.
fn reconnect(conn: &mut SwConn, local: usize, poll: &Poll, shared: &Arc<EmuShared>) {
    shared.lost.fetch_add(1, Ordering::Relaxed);
    conn.stats.reconnects.fetch_add(1, Ordering::Relaxed);
    if conn.stats.ready.swap(false, Ordering::AcqRel) {
        shared.ready_count.fetch_sub(1, Ordering::AcqRel);
    }
    let _ = poll.registry().deregister(&mut conn.stream);
    // Keep retrying the connect itself; the controller may be restarting.
    let stream = loop {
        match TcpStream::connect(shared.addr) {
            Ok(s) => break s,
            Err(_) => {
                if shared.stop.load(Ordering::Acquire) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    };
    conn.stream = stream;
    conn.state = SwState::Connecting;
    conn.inbuf.clear();
    conn.consumed = 0;
    conn.outbuf.clear();
    conn.out_pos = 0;
    conn.sent_local = 0;
    conn.responded_local = 0;
    conn.last_send = None;
    poll.registry()
        .register(&mut conn.stream, Token(local), Interest::READABLE | Interest::WRITABLE)
        .expect("re-register switch conn");
}

/// Runs one switch connection forward as far as it will go without blocking:
/// confirm the connect, read and answer controller messages, top up probes,
/// flush. Any I/O error or EOF surfaces as `Err`.
fn drive(conn: &mut SwConn, shared: &Arc<EmuShared>) -> Result<(), ()> {
    if conn.state == SwState::Connecting {
        // Nonblocking connect: readiness means the handshake finished one
        // way or the other; peer_addr distinguishes success from refusal.
        match conn.stream.peer_addr() {
            Ok(_) => {
                // Switches speak first: hello goes out immediately.
                conn.outbuf.extend_from_slice(&ofwire::OfHeader::new(
                    ofwire::MsgType::Hello,
                    ofwire::HEADER_LEN as u16,
                    0,
                ).serialize());
                conn.state = SwState::Handshake;
            }
            Err(e) if e.kind() == io::ErrorKind::NotConnected => return Ok(()),
            Err(_) => return Err(()),
        }
    }
    read_available(conn)?;
    process_frames(conn, shared)?;
    top_up_probes(conn, shared);
    flush(conn)?;
    Ok(())
}

fn read_available(conn: &mut SwConn) -> Result<(), ()> {
    let mut chunk = [0u8; 64 * 1024];
    loop {
        match conn.stream.read(&mut chunk) {
            Ok(0) => return Err(()),
            Ok(n) => conn.inbuf.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(_) => return Err(()),
        }
    }
}

fn process_frames(conn: &mut SwConn, shared: &Arc<EmuShared>) -> Result<(), ()> {
    loop {
        let pending = &conn.inbuf[conn.consumed..];
        let len = match frame_len(pending) {
            Ok(Some(len)) if pending.len() >= len => len,
            Ok(_) => break,
            // A controller feeding us garbage framing: drop the connection.
            Err(_) => return Err(()),
        };
        // Copy out of the borrow so handle_response may append to outbuf.
        let start = conn.consumed;
        conn.consumed += len;
        handle_response(conn, start, len, shared);
    }
    // Compact once the consumed prefix dominates, amortizing the memmove.
    if conn.consumed > 0 && conn.consumed * 2 >= conn.inbuf.len() {
        conn.inbuf.drain(..conn.consumed);
        conn.consumed = 0;
    }
    Ok(())
}

fn handle_response(conn: &mut SwConn, start: usize, len: usize, shared: &Arc<EmuShared>) {
    let msg_type = conn.inbuf[start + 1];
    let stats = &conn.stats;
    match msg_type {
        type_code::FLOW_MOD => {
            stats.flow_mods.fetch_add(1, Ordering::Relaxed);
            stats.flow_mod_bytes.fetch_add(len as u64, Ordering::Relaxed);
            let frame = &conn.inbuf[start..start + len];
            if shared.cfg.collect_responses {
                // Learned replies carry exactly one output action; its port
                // lives at a fixed offset in the 80-byte form.
                let port = if len == ofwire::LEARNED_FLOW_MOD_LEN {
                    u16::from_be_bytes([frame[76], frame[77]])
                } else {
                    u16::MAX
                };
                let xid = u32::from_be_bytes([frame[4], frame[5], frame[6], frame[7]]);
                stats.response_log.lock().unwrap().push((xid, port));
            }
            count_response(conn);
        }
        type_code::PACKET_OUT => {
            let frame = &conn.inbuf[start..start + len];
            if super::audit::is_lldp_packet_out(frame) {
                stats.lldp_packet_outs.fetch_add(1, Ordering::Relaxed);
            } else {
                stats.packet_outs.fetch_add(1, Ordering::Relaxed);
                stats.packet_out_bytes.fetch_add(len as u64, Ordering::Relaxed);
                count_response(conn);
            }
        }
        type_code::ECHO_REQUEST => {
            // Echo the payload back with the reply type.
            let mut reply = conn.inbuf[start..start + len].to_vec();
            reply[1] = type_code::ECHO_REPLY;
            conn.outbuf.extend_from_slice(&reply);
        }
        type_code::FEATURES_REQUEST => {
            let xid = u32::from_be_bytes(
                conn.inbuf[start + 4..start + 8].try_into().unwrap(),
            );
            let dpid = shared.cfg.dpid_offset + conn.index as u64;
            let reply = encode_to_vec(&OfMessage::FeaturesReply(FeaturesReply {
                xid,
                datapath_id: dpid,
                n_buffers: 256,
                n_tables: 2,
                capabilities: 0x87, // flow stats, table stats, port stats, arp match ip
                actions: 0xfff,
                ports: Vec::new(),
            }));
            conn.outbuf.extend_from_slice(&reply);
            if conn.state == SwState::Handshake {
                conn.state = SwState::Delay(Instant::now() + shared.cfg.handshake_delay);
                if !conn.stats.ready.swap(true, Ordering::AcqRel) {
                    shared.ready_count.fetch_add(1, Ordering::AcqRel);
                }
            }
        }
        type_code::GET_CONFIG_REQUEST => {
            let xid = u32::from_be_bytes(
                conn.inbuf[start + 4..start + 8].try_into().unwrap(),
            );
            conn.outbuf.extend_from_slice(&raw_get_config_reply(xid));
        }
        type_code::BARRIER_REQUEST => {
            let xid = u32::from_be_bytes(
                conn.inbuf[start + 4..start + 8].try_into().unwrap(),
            );
            conn.outbuf.extend_from_slice(&raw_barrier_reply(xid));
        }
        type_code::VENDOR => {
            // No vendor extensions here. Controllers probing for them expect
            // a bad-vendor error, not silence.
            let xid = u32::from_be_bytes(
                conn.inbuf[start + 4..start + 8].try_into().unwrap(),
            );
            let reply = encode_to_vec(&OfMessage::Error(ErrorMsg {
                xid,
                err_type: 1, // OFPET_BAD_REQUEST
                code: 3,     // OFPBRC_BAD_VENDOR
                data: conn.inbuf[start..start + len.min(64)].to_vec(),
            }));
            conn.outbuf.extend_from_slice(&reply);
        }
        type_code::ERROR => {
            stats.errors.fetch_add(1, Ordering::Relaxed);
        }
        type_code::HELLO => {}
        _ => {
            stats.other.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Books one counted response: totals, the in-flight window, and (latency
/// mode) the round-trip sample for the probe it answers.
fn count_response(conn: &mut SwConn) {
    conn.stats.responses.fetch_add(1, Ordering::Relaxed);
    conn.responded_local += 1;
    if let Some(sent_at) = conn.last_send.take() {
        let us = sent_at.elapsed().as_micros() as u64;
        let mut samples = conn.stats.latencies_us.lock().unwrap();
        if samples.len() < LATENCY_SAMPLE_CAP {
            samples.push(us);
        }
    }
}

fn top_up_probes(conn: &mut SwConn, shared: &Arc<EmuShared>) {
    if conn.state != SwState::Running {
        return;
    }
    let cfg = &shared.cfg;
    loop {
        if let Some(limit) = cfg.probe_limit {
            if conn.seq >= limit {
                return;
            }
        }
        if !window_allows(cfg.mode, conn.in_flight(), cfg.window_bytes) {
            return;
        }
        let (src, dst) = gen_macs(conn.index as u16, conn.seq, cfg.unique_macs);
        let xid = conn.seq as u32;
        let buffer_id = (conn.seq % 100_000) as u32;
        let probe = probe_packet_in(xid, buffer_id, 1, src, dst);
        conn.outbuf.extend_from_slice(&probe);
        conn.seq += 1;
        conn.sent_local += 1;
        conn.stats.probes_sent.fetch_add(1, Ordering::Relaxed);
        if cfg.mode == BenchMode::Latency {
            conn.last_send = Some(Instant::now());
        }
    }
}

fn flush(conn: &mut SwConn) -> Result<(), ()> {
    while conn.out_pos < conn.outbuf.len() {
        match conn.stream.write(&conn.outbuf[conn.out_pos..]) {
            Ok(0) => return Err(()),
            Ok(n) => conn.out_pos += n,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(_) => return Err(()),
        }
    }
    if conn.out_pos == conn.outbuf.len() {
        conn.outbuf.clear();
        conn.out_pos = 0;
    } else if conn.out_pos > 64 * 1024 {
        conn.outbuf.drain(..conn.out_pos);
        conn.out_pos = 0;
    }
    Ok(())
}
