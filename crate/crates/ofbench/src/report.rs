//! Aggregation and emission: latency CDFs, throughput statistics, the
//! phase-time breakdown, energy efficiency, and the CSV/JSON interfaces
//! other tooling consumes.
//!
//! Plotting stays out of the repository on purpose: the CSV *is* the
//! interface. Schema stability matters more than prettiness, so every row
//! carries a `schema_version` and floats are rounded to six significant
//! digits before they are stored — emitting, parsing, and re-emitting a
//! report is byte-identical.

use serde::{Deserialize, Serialize};

use crate::bench::sweep::SweepPoint;
use crate::bench::{LoopResult, RunResult};
use crate::engine::counters::CountersSnapshot;

/// Bumped whenever a column is added, removed, or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportError {
    /// A CDF needs at least one sample.
    EmptySamples,
    /// Aggregation needs more loops than it is told to discard.
    InsufficientLoops { have: usize, warmup: usize },
    /// Efficiency is undefined at or below zero Watts.
    NonpositiveWatts,
    /// Stored report could not be parsed.
    Malformed(String),
}

impl std::fmt::Display for ReportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReportError::EmptySamples => write!(f, "cannot build a CDF from zero samples"),
            ReportError::InsufficientLoops { have, warmup } => {
                write!(f, "need more than {warmup} warmup loops, have {have} total")
            }
            ReportError::NonpositiveWatts => write!(f, "watts must be positive"),
            ReportError::Malformed(why) => write!(f, "malformed report input: {why}"),
        }
    }
}

impl std::error::Error for ReportError {}

// ---------------------------------------------------------------------------
// Latency CDF
// ---------------------------------------------------------------------------

/// Empirical latency distribution over microsecond samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyCdf {
    sorted_us: Vec<u64>,
}

/// Builds the empirical CDF of `samples` (microseconds).
pub fn build_cdf(samples: &[u64]) -> Result<LatencyCdf, ReportError> {
    if samples.is_empty() {
        return Err(ReportError::EmptySamples);
    }
    let mut sorted_us = samples.to_vec();
    sorted_us.sort_unstable();
    Ok(LatencyCdf { sorted_us })
}

impl LatencyCdf {
    /// Quantile accessor: `q(p)` is the sample at rank `ceil(p·n)` of the
    /// sorted array (1-based), i.e. the smallest sample x with at least a
    /// `p` fraction of samples ≤ x; `q(0)` is the minimum.
    pub fn q(&self, p: f64) -> u64 {
        debug_assert!((0.0..=1.0).contains(&p), "quantile {p} outside [0,1]");
        let n = self.sorted_us.len();
        if p <= 0.0 {
            return self.sorted_us[0];
        }
        let rank = (p * n as f64).ceil() as usize;
        self.sorted_us[rank.clamp(1, n) - 1]
    }

    pub fn len(&self) -> usize {
        self.sorted_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_us.is_empty()
    }

    pub fn min(&self) -> u64 {
        self.sorted_us[0]
    }

    pub fn max(&self) -> u64 {
        *self.sorted_us.last().unwrap()
    }

    /// The sorted samples, for merging or external analysis.
    pub fn samples(&self) -> &[u64] {
        &self.sorted_us
    }
}

// ---------------------------------------------------------------------------
// Phase profile
// ---------------------------------------------------------------------------

/// Where a sampled packet's wall time went, as fractions of the sampled
/// window. The remainder (queue waits, batching, scheduling) is
/// `unattributed` — there is no portable way to pin it on the kernel, so it
/// is reported as what it is: time the engine observed but cannot assign to
/// a phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub decode: f64,
    /// Learning-switch lookup + learn, including table synchronization.
    pub app: f64,
    pub encode: f64,
    /// Socket-write share attributed to sampled replies.
    pub io: f64,
    pub unattributed: f64,
    /// Packets the fractions are based on.
    pub sampled_packets: u64,
}

impl PhaseProfile {
    /// Derives the profile from engine counters. `None` when nothing was
    /// sampled (short runs, sampling disabled).
    pub fn from_counters(snap: &CountersSnapshot) -> Option<PhaseProfile> {
        if snap.window_ns == 0 || snap.sampled_packets == 0 {
            return None;
        }
        let w = snap.window_ns as f64;
        let decode = snap.decode_ns as f64 / w;
        let app = snap.app_ns as f64 / w;
        let encode = snap.encode_ns as f64 / w;
        let io = snap.io_ns as f64 / w;
        let attributed = decode + app + encode + io;
        Some(PhaseProfile {
            decode,
            app,
            encode,
            io,
            unattributed: (1.0 - attributed).max(0.0),
            sampled_packets: snap.sampled_packets,
        })
    }

    pub fn attributed_sum(&self) -> f64 {
        self.decode + self.app + self.encode + self.io
    }
}

// ---------------------------------------------------------------------------
// Run aggregation
// ---------------------------------------------------------------------------

/// Throughput statistics and merged distributions over a run's retained
/// loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Loops actually aggregated (valid, post-warmup).
    pub loops_counted: usize,
    pub mean_rps: f64,
    /// Population standard deviation across retained loops.
    pub stddev_rps: f64,
    pub min_rps: f64,
    pub max_rps: f64,
    pub total_responses: u64,
    /// Merged latency CDF across retained loops, when samples exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cdf: Option<LatencyCdf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseProfile>,
    /// Engine counter totals for the run, when the engine was co-resident.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<CountersSnapshot>,
}

/// Aggregates a run, excluding the first `warmup` loops and any loop marked
/// invalid (connection loss mid-window).
pub fn aggregate_run(run: &RunResult, warmup: usize) -> Result<RunSummary, ReportError> {
    let mut summary = aggregate_loops(&run.loops, warmup)?;
    if let Some(engine) = &run.engine_counters {
        summary.phase = PhaseProfile::from_counters(engine);
        summary.engine = Some(*engine);
    }
    Ok(summary)
}

/// Loops retained for aggregation: drop the first `warmup` by measurement
/// index, then drop invalid loops.
fn retained(loops: &[LoopResult], warmup: usize) -> impl Iterator<Item = &LoopResult> {
    loops.iter().filter(move |l| l.index >= warmup && l.valid)
}

pub fn aggregate_loops(loops: &[LoopResult], warmup: usize) -> Result<RunSummary, ReportError> {
    if loops.len() <= warmup {
        return Err(ReportError::InsufficientLoops { have: loops.len(), warmup });
    }
    let kept: Vec<&LoopResult> = retained(loops, warmup).collect();
    if kept.is_empty() {
        return Err(ReportError::InsufficientLoops { have: loops.len(), warmup });
    }
    let n = kept.len() as f64;
    let mean = kept.iter().map(|l| l.throughput_rps).sum::<f64>() / n;
    let var = kept.iter().map(|l| (l.throughput_rps - mean).powi(2)).sum::<f64>() / n;
    let min = kept.iter().map(|l| l.throughput_rps).fold(f64::INFINITY, f64::min);
    let max = kept.iter().map(|l| l.throughput_rps).fold(f64::NEG_INFINITY, f64::max);
    let mut samples: Vec<u64> = Vec::new();
    for l in &kept {
        samples.extend_from_slice(&l.latency_us);
    }
    Ok(RunSummary {
        loops_counted: kept.len(),
        mean_rps: mean,
        stddev_rps: var.sqrt(),
        min_rps: min,
        max_rps: max,
        total_responses: kept.iter().map(|l| l.responses).sum(),
        cdf: build_cdf(&samples).ok(),
        phase: None,
        engine: None,
    })
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

/// Throughput per Watt. Watts are operator-supplied (external meter or
/// nameplate); the division is the reproducible part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub watts: f64,
    pub throughput_rps: f64,
    pub efficiency_rps_per_w: f64,
}

pub fn efficiency(throughput_rps: f64, watts: f64) -> Result<EnergyReport, ReportError> {
    if watts.is_nan() || watts <= 0.0 {
        return Err(ReportError::NonpositiveWatts);
    }
    Ok(EnergyReport { watts, throughput_rps, efficiency_rps_per_w: throughput_rps / watts })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// One emitted data row: a retained loop of one sweep point.
///
/// The engine columns (`flowmods`, `packetouts`, `allocs`, `bytes_copied`,
/// `handoffs`) are *run-level* totals repeated on each of the run's rows —
/// engine counters are snapshotted per run, not per loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: String,
    pub point: u64,
    #[serde(rename = "loop")]
    pub loop_index: usize,
    pub throughput_rps: f64,
    /// 0 when the loop collected no latency samples (throughput mode).
    pub p50_us: f64,
    pub p99_us: f64,
    pub flowmods: u64,
    pub packetouts: u64,
    pub allocs: u64,
    pub bytes_copied: u64,
    pub handoffs: u64,
    /// 0 when no watts figure was supplied.
    pub watts: f64,
    pub efficiency_rps_per_w: f64,
    pub schema_version: u32,
}

/// Rounds to six significant digits, the report's fixed float precision.
/// Rounding happens *before* storage so that emit→parse→emit is stable.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor();
    let factor = 10f64.powf(5.0 - magnitude);
    (x * factor).round() / factor
}

/// Flattens sweep results into rows: one per retained loop per successful
/// point. Failed points and discarded loops contribute nothing.
pub fn rows_from_sweep(points: &[SweepPoint], warmup: usize, watts: Option<f64>) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for point in points {
        let run = match &point.result {
            Ok(run) => run,
            Err(_) => continue,
        };
        let engine = run.engine_counters.as_ref();
        for l in retained(&run.loops, warmup) {
            let (p50, p99) = match build_cdf(&l.latency_us) {
                Ok(cdf) => (cdf.q(0.5) as f64, cdf.q(0.99) as f64),
                Err(_) => (0.0, 0.0),
            };
            let watts_val = watts.unwrap_or(0.0);
            let eff = if watts_val > 0.0 { l.throughput_rps / watts_val } else { 0.0 };
            rows.push(ReportRow {
                axis: point.axis.clone(),
                point: point.point,
                loop_index: l.index,
                throughput_rps: sig6(l.throughput_rps),
                p50_us: sig6(p50),
                p99_us: sig6(p99),
                flowmods: l.flow_mods,
                packetouts: l.packet_outs,
                allocs: engine.map_or(0, |e| e.allocations),
                bytes_copied: engine.map_or(0, |e| e.bytes_copied),
                handoffs: engine.map_or(0, |e| e.handoffs),
                watts: sig6(watts_val),
                efficiency_rps_per_w: sig6(eff),
                schema_version: SCHEMA_VERSION,
            });
        }
    }
    rows
}

pub const CSV_HEADER: &str = "axis,point,loop,throughput_rps,p50_us,p99_us,flowmods,packetouts,\
                              allocs,bytes_copied,handoffs,watts,efficiency_rps_per_w,schema_version";

/// Renders rows as CSV with the documented header. An empty row set yields
/// the header alone.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.point,
            r.loop_index,
            r.throughput_rps,
            r.p50_us,
            r.p99_us,
            r.flowmods,
            r.packetouts,
            r.allocs,
            r.bytes_copied,
            r.handoffs,
            r.watts,
            r.efficiency_rps_per_w,
            r.schema_version,
        ));
    }
    out
}

/// Renders rows as a JSON array (pretty, one canonical form).
pub fn to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

pub fn rows_from_json(s: &str) -> Result<Vec<ReportRow>, ReportError> {
    serde_json::from_str(s).map_err(|e| ReportError::Malformed(e.to_string()))
}

/// Serialized form of full sweep results (the `report` subcommand's input).
pub fn sweep_to_json(points: &[SweepPoint]) -> String {
    serde_json::to_string_pretty(points).expect("sweep points serialize")
}

pub fn sweep_from_json(s: &str) -> Result<Vec<SweepPoint>, ReportError> {
    serde_json::from_str(s).map_err(|e| ReportError::Malformed(e.to_string()))
}
