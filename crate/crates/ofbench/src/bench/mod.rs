//! Benchmark harness: configuration, the measurement loop, and run results.
//!
//! A *run* is `loops` timed windows of `loop_duration` each. The emulator
//! counts continuously into per-switch cumulative counters; the coordinator
//! snapshots the sums at each window boundary and reports deltas, so the hot
//! path never synchronizes with the measurement clock. A window during which
//! any switch connection dropped is marked invalid and rerun (the emulator
//! reconnects on its own to restore the configured load).

pub mod audit;
pub mod sweep;
pub mod switchsim;

use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::engine::counters::CountersSnapshot;

pub use audit::AuditReport;
use switchsim::{Emulator, Totals};

/// Probe discipline for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// One outstanding probe per switch; round-trip times recorded.
    Latency,
    /// Saturating load under a bounded in-flight byte window.
    Throughput,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Latency => "latency",
            BenchMode::Throughput => "throughput",
        }
    }
}

/// Everything a measurement run needs to know.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Controller address, `host:port`.
    pub controller: String,
    /// Number of emulated switches.
    pub switches: usize,
    /// Unique source MACs per switch (the heterogeneity axis).
    pub unique_macs: u64,
    /// Emulator-side event-loop threads; switches are distributed
    /// round-robin across them.
    pub worker_threads: usize,
    /// Timed windows per run.
    pub loops: usize,
    /// Length of each timed window.
    pub loop_duration: Duration,
    /// Pause between handshake completion and the first probe, mirroring
    /// the classic `-D` workaround for controllers that drop early probes.
    pub handshake_delay: Duration,
    pub mode: BenchMode,
    /// Leading loops excluded from aggregates (connection and cache warm-up
    /// skew them).
    pub warmup_loops: usize,
    /// Throughput-mode in-flight budget per switch, in bytes.
    pub window_bytes: usize,
    /// Datapath id of switch 0; switch i reports `dpid_offset + i`.
    pub dpid_offset: u64,
    /// How long switches get to connect and finish their handshakes before
    /// the run is abandoned.
    pub ready_timeout: Duration,
    /// When set, each switch sends exactly this many probes and the run
    /// measures until the responses drain — the replay-comparison mode.
    pub probe_limit: Option<u64>,
    /// Record (xid, output port) for every flow-mod received. Only sensible
    /// together with `probe_limit`; unbounded collection would eat memory.
    pub collect_responses: bool,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            controller: format!("127.0.0.1:{}", crate::DEFAULT_OPENFLOW_PORT),
            switches: 64,
            unique_macs: 1_000_000,
            worker_threads: default_emulator_threads(),
            loops: 10,
            loop_duration: Duration::from_secs(10),
            handshake_delay: Duration::ZERO,
            mode: BenchMode::Latency,
            warmup_loops: 1,
            window_bytes: 1 << 16,
            dpid_offset: 1,
            ready_timeout: Duration::from_secs(10),
            probe_limit: None,
            collect_responses: false,
        }
    }
}

fn default_emulator_threads() -> usize {
    crate::engine::affinity::available_cores().clamp(1, 8)
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.switches < 1 {
            return Err("switches must be at least 1".into());
        }
        if self.unique_macs < 2 {
            return Err("unique_macs must be at least 2 (src and dst must be able to differ)".into());
        }
        if self.loops < 1 {
            return Err("loops must be at least 1".into());
        }
        if self.worker_threads < 1 {
            return Err("worker_threads must be at least 1".into());
        }
        if self.window_bytes < crate::ofwire::PROBE_PACKET_IN_LEN {
            return Err(format!(
                "window_bytes must admit at least one {}-byte probe",
                crate::ofwire::PROBE_PACKET_IN_LEN
            ));
        }
        if self.collect_responses && self.probe_limit.is_none() {
            return Err("collect_responses requires probe_limit (unbounded logs would grow without limit)".into());
        }
        Ok(())
    }

    /// True when the controller address is a loopback IP. Loopback numbers
    /// measure the host competing with itself and are labeled as such.
    pub fn is_loopback(&self) -> bool {
        self.controller
            .parse::<SocketAddr>()
            .map(|a| a.ip().is_loopback())
            .unwrap_or(false)
    }
}

/// One timed window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopResult {
    /// Zero-based measurement index; reruns reuse the index they replace.
    pub index: usize,
    /// Probes sent during the window.
    pub probes: u64,
    /// Counted responses (flow-mods + non-LLDP packet-outs) during the window.
    pub responses: u64,
    pub flow_mods: u64,
    pub packet_outs: u64,
    pub elapsed_s: f64,
    /// responses / elapsed (0 for a zero-length window).
    pub throughput_rps: f64,
    /// Round-trip samples collected during the window (latency mode).
    pub latency_us: Vec<u64>,
    /// False when a connection dropped mid-window; invalid loops are kept
    /// for the record but excluded from aggregates.
    pub valid: bool,
}

/// A complete measurement run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: String,
    /// True when measured over loopback (host competing with itself).
    pub loopback: bool,
    pub loops: Vec<LoopResult>,
    pub total_probes: u64,
    pub total_responses: u64,
    pub audit: AuditReport,
    /// Connection-loss events across the whole run.
    pub reconnects: u64,
    /// Error messages the controller sent the emulated switches.
    pub protocol_errors: u64,
    /// Per-switch (xid, output port) response logs, when collected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_logs: Option<Vec<Vec<(u32, u16)>>>,
    /// Engine-side counter delta over the run, when the engine is
    /// co-resident and the caller attached it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine_counters: Option<CountersSnapshot>,
}

#[derive(Debug)]
pub enum BenchError {
    InvalidConfig(String),
    Io(io::Error),
    /// Switches did not finish their handshakes in time.
    NotReady,
    /// The sanity check tripped: more responses counted than probes sent.
    MoreResponsesThanProbes { probes: u64, responses: u64 },
}

impl std::fmt::Display for BenchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchError::InvalidConfig(why) => write!(f, "invalid benchmark config: {why}"),
            BenchError::Io(e) => write!(f, "benchmark i/o error: {e}"),
            BenchError::NotReady => write!(f, "switches failed to complete handshakes before the deadline"),
            BenchError::MoreResponsesThanProbes { probes, responses } => write!(
                f,
                "counted {responses} responses for only {probes} probes — response counting is broken"
            ),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<io::Error> for BenchError {
    fn from(e: io::Error) -> BenchError {
        BenchError::Io(e)
    }
}

/// Budget of extra windows for rerunning loops invalidated by connection
/// loss.
const MAX_RERUNS: usize = 3;
/// Probe-limit runs finish when counters stop moving for this long.
const DRAIN_QUIET: Duration = Duration::from_millis(500);
/// Hard ceiling on waiting for a probe-limit run to drain.
const DRAIN_TIMEOUT: Duration = Duration::from_secs(60);

/// Runs one complete measurement against `cfg.controller`.
pub fn run_bench(cfg: &BenchConfig) -> Result<RunResult, BenchError> {
    cfg.validate().map_err(BenchError::InvalidConfig)?;
    let emulator = Emulator::start(cfg)?;
    if !emulator.wait_ready(cfg.ready_timeout) {
        emulator.stop();
        return Err(BenchError::NotReady);
    }

    let loops = if cfg.probe_limit.is_some() {
        run_probe_limited(cfg, &emulator)
    } else if cfg.loop_duration.is_zero() {
        // Zero-length windows measure nothing by definition.
        (0..cfg.loops)
            .map(|index| LoopResult {
                index,
                probes: 0,
                responses: 0,
                flow_mods: 0,
                packet_outs: 0,
                elapsed_s: 0.0,
                throughput_rps: 0.0,
                latency_us: Vec::new(),
                valid: true,
            })
            .collect()
    } else {
        run_timed_loops(cfg, &emulator)
    };

    let totals = emulator.totals();
    let response_logs = if cfg.collect_responses {
        Some(emulator.stats.iter().map(|s| s.take_response_log()).collect())
    } else {
        None
    };
    let reconnects = emulator.lost_connections();
    emulator.stop();

    if totals.responses > totals.probes_sent {
        return Err(BenchError::MoreResponsesThanProbes {
            probes: totals.probes_sent,
            responses: totals.responses,
        });
    }

    Ok(RunResult {
        mode: cfg.mode.as_str().to_string(),
        loopback: cfg.is_loopback(),
        loops,
        total_probes: totals.probes_sent,
        total_responses: totals.responses,
        audit: AuditReport::from_counts(
            totals.flow_mods,
            totals.flow_mod_bytes,
            totals.packet_outs,
            totals.packet_out_bytes,
            totals.lldp_packet_outs,
            totals.other,
        ),
        reconnects,
        protocol_errors: totals.errors,
        response_logs,
        engine_counters: None,
    })
}

fn loop_from_delta(
    index: usize,
    t0: Totals,
    t1: Totals,
    elapsed: Duration,
    latency_us: Vec<u64>,
    valid: bool,
) -> LoopResult {
    let responses = t1.responses - t0.responses;
    let elapsed_s = elapsed.as_secs_f64();
    LoopResult {
        index,
        probes: t1.probes_sent - t0.probes_sent,
        responses,
        flow_mods: t1.flow_mods - t0.flow_mods,
        packet_outs: t1.packet_outs - t0.packet_outs,
        elapsed_s,
        throughput_rps: if elapsed_s > 0.0 { responses as f64 / elapsed_s } else { 0.0 },
        latency_us,
        valid,
    }
}

fn drain_latencies(emulator: &Emulator) -> Vec<u64> {
    let mut all = Vec::new();
    for s in &emulator.stats {
        all.append(&mut s.take_latencies());
    }
    all
}

fn run_timed_loops(cfg: &BenchConfig, emulator: &Emulator) -> Vec<LoopResult> {
    // Samples accumulated between readiness and the first window belong to
    // no loop; discard them so window boundaries stay crisp.
    drop(drain_latencies(emulator));
    let mut results = Vec::with_capacity(cfg.loops);
    let mut reruns = 0usize;
    for index in 0..cfg.loops {
        loop {
            let lost_before = emulator.lost_connections();
            let t0 = emulator.totals();
            let started = Instant::now();
            std::thread::sleep(cfg.loop_duration);
            let t1 = emulator.totals();
            let elapsed = started.elapsed();
            let latency_us = drain_latencies(emulator);
            let valid = emulator.lost_connections() == lost_before;
            results.push(loop_from_delta(index, t0, t1, elapsed, latency_us, valid));
            if valid || reruns >= MAX_RERUNS {
                break;
            }
            reruns += 1;
            log::warn!("loop {index} invalidated by connection loss; rerunning");
        }
    }
    results
}

/// Fixed-probe-count run: wait until every switch has sent its quota and the
/// response stream has gone quiet, then report the whole thing as one loop.
fn run_probe_limited(cfg: &BenchConfig, emulator: &Emulator) -> Vec<LoopResult> {
    let limit = cfg.probe_limit.expect("probe_limit checked by caller");
    let target = limit * cfg.switches as u64;
    let started = Instant::now();
    let t0 = Totals::default(); // cumulative counters started at zero
    let mut last_change = Instant::now();
    let mut last_seen = emulator.totals();
    loop {
        std::thread::sleep(Duration::from_millis(10));
        let now = emulator.totals();
        if now != last_seen {
            last_seen = now;
            last_change = Instant::now();
        }
        let all_sent = now.probes_sent >= target;
        let all_answered = now.responses >= now.probes_sent;
        if (all_sent && all_answered) || started.elapsed() > DRAIN_TIMEOUT {
            break;
        }
        // A controller that drops some probes would stall `responses` short
        // of `probes_sent`; the quiet timer ends the wait anyway.
        if all_sent && last_change.elapsed() > DRAIN_QUIET {
            break;
        }
    }
    let t1 = emulator.totals();
    let elapsed = started.elapsed();
    let latency_us = drain_latencies(emulator);
    let valid = emulator.lost_connections() == 0;
    vec![loop_from_delta(0, t0, t1, elapsed, latency_us, valid)]
}

/// Convenience wrapper for replay comparisons: sends exactly
/// `cfg.probe_limit` probes per switch and returns the per-switch
/// (xid, output port) response logs.
pub fn run_probe_replay(cfg: &BenchConfig) -> Result<Vec<Vec<(u32, u16)>>, BenchError> {
    let mut cfg = cfg.clone();
    cfg.collect_responses = true;
    if cfg.probe_limit.is_none() {
        return Err(BenchError::InvalidConfig("probe replay requires probe_limit".into()));
    }
    let result = run_bench(&cfg)?;
    Ok(result.response_logs.expect("collect_responses was set"))
}
