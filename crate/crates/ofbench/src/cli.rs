//! The `ofbench` binary: run the engine, run a measurement, sweep an axis,
//! or re-render stored results.
//!
//! Exit codes: 0 success, 1 audit violation or run failure, 2 usage error.
//! Configuration layers field-wise, lowest to highest precedence: defaults,
//! `--config` file, `OFBENCH_PORT`/`OFBENCH_CONTROLLER`, flags. The
//! effective configuration hash is logged at startup so two invocations can
//! be checked for equivalence regardless of how their settings arrived.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::bench::sweep::{run_sweep, SweepAxis, SweepConfig, SweepPoint};
use crate::bench::{run_bench, BenchConfig, BenchMode, RunResult};
use crate::bufferpool::BufferStrategyKind;
use crate::config;
use crate::engine::{run_engine, StrategyMatrix, ThreadingModelKind};
use crate::learnswitch::TableStrategyKind;
use crate::report::{
    aggregate_run, rows_from_sweep, sweep_from_json, sweep_to_json, to_csv, RunSummary,
};

const EXIT_OK: i32 = 0;
const EXIT_FAILURE: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ofbench",
    version,
    about = "OpenFlow 1.0 learning-switch controller and CBench-compatible benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once; variant size is irrelevant
enum Cmd {
    /// Run the controller engine until SIGINT.
    Engine(EngineArgs),
    /// Run one measurement against a controller.
    Bench(BenchArgs),
    /// Run a full sweep along one axis, engine lifecycle included.
    Sweep(SweepArgs),
    /// Re-render stored sweep results (JSON) as CSV and a summary.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct EngineFlags {
    /// Threading model: run_to_completion | single_io_queue |
    /// shared_pool_queue (aliases: rtc, sio, spq).
    #[arg(long)]
    threading: Option<String>,
    /// Engine worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Pin worker threads to cores round-robin.
    #[arg(long)]
    pin_threads: bool,
    /// Buffer strategy: per_packet_object | preallocated_pool
    /// (aliases: object, pool).
    #[arg(long)]
    buffers: Option<String>,
    /// MAC table layout: shared_locked | sharded_per_worker
    /// (aliases: shared, sharded).
    #[arg(long)]
    table: Option<String>,
    /// Engine listen port (0 picks an ephemeral port).
    #[arg(long)]
    port: Option<u16>,
    /// Engine bind address.
    #[arg(long)]
    host: Option<String>,
    /// Stripe count for the shared table (power of two).
    #[arg(long)]
    table_stripes: Option<usize>,
    /// Sample one packet in 2^shift for phase timing.
    #[arg(long)]
    sampling_shift: Option<u32>,
    /// Queue capacity for the queued threading models.
    #[arg(long)]
    queue_capacity: Option<usize>,
}

impl EngineFlags {
    fn apply(&self, matrix: &mut StrategyMatrix) -> Result<(), String> {
        if let Some(s) = &self.threading {
            matrix.threading.kind = parse_threading(s)?;
        }
        if let Some(v) = self.workers {
            matrix.threading.worker_count = v;
        }
        if self.pin_threads {
            matrix.threading.pin_threads = true;
        }
        if let Some(s) = &self.buffers {
            matrix.buffers.kind = parse_buffers(s)?;
        }
        if let Some(s) = &self.table {
            matrix.table = parse_table(s)?;
        }
        if let Some(v) = self.port {
            matrix.listen_port = v;
        }
        if let Some(v) = &self.host {
            matrix.listen_host = v.clone();
        }
        if let Some(v) = self.table_stripes {
            matrix.table_stripes = v;
        }
        if let Some(v) = self.sampling_shift {
            matrix.sampling_shift = v;
        }
        if let Some(v) = self.queue_capacity {
            matrix.queue_capacity = v;
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone)]
struct BenchFlags {
    /// Controller address, host:port.
    #[arg(short = 'c', long)]
    controller: Option<String>,
    /// Emulated switches.
    #[arg(short = 's', long)]
    switches: Option<usize>,
    /// Unique source MACs per switch.
    #[arg(short = 'M', long)]
    macs: Option<u64>,
    /// Timed loops per measurement.
    #[arg(short = 'l', long)]
    loops: Option<usize>,
    /// Loop length in milliseconds.
    #[arg(short = 'm', long)]
    ms_per_loop: Option<u64>,
    /// Delay between handshake and first probe, in milliseconds.
    #[arg(short = 'D', long = "delay")]
    delay_ms: Option<u64>,
    /// One outstanding probe per switch, recording round trips (default).
    #[arg(long, conflicts_with = "throughput")]
    latency: bool,
    /// Saturating load under the in-flight window.
    #[arg(long)]
    throughput: bool,
    /// Leading loops excluded from aggregates.
    #[arg(short = 'w', long)]
    warmup_loops: Option<usize>,
    /// Emulator event-loop threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Throughput-mode in-flight budget per switch, in bytes.
    #[arg(long)]
    window_bytes: Option<usize>,
    /// Platform power draw in Watts, for the efficiency column.
    #[arg(long)]
    watts: Option<f64>,
}

impl BenchFlags {
    fn apply(&self, bench: &mut BenchConfig) -> Result<Option<f64>, String> {
        if let Some(v) = &self.controller {
            bench.controller = v.clone();
        }
        if let Some(v) = self.switches {
            bench.switches = v;
        }
        if let Some(v) = self.macs {
            bench.unique_macs = v;
        }
        if let Some(v) = self.loops {
            bench.loops = v;
        }
        if let Some(v) = self.ms_per_loop {
            bench.loop_duration = Duration::from_millis(v);
        }
        if let Some(v) = self.delay_ms {
            bench.handshake_delay = Duration::from_millis(v);
        }
        if self.latency {
            bench.mode = BenchMode::Latency;
        }
        if self.throughput {
            bench.mode = BenchMode::Throughput;
        }
        if let Some(v) = self.warmup_loops {
            bench.warmup_loops = v;
        }
        if let Some(v) = self.threads {
            bench.worker_threads = v;
        }
        if let Some(v) = self.window_bytes {
            bench.window_bytes = v;
        }
        if let Some(w) = self.watts {
            if w.is_nan() || w <= 0.0 {
                return Err("--watts must be positive".into());
            }
        }
        Ok(self.watts)
    }
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineFlags,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    bench: BenchFlags,
    /// Write the full run result as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write per-loop CSV rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Axis to sweep: concurrency | heterogeneity | connectivity.
    #[arg(long)]
    axis: String,
    /// Comma-separated points, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',', required = true)]
    points: Vec<u64>,
    /// Benchmark a remote controller instead of spawning the engine
    /// in-process per point.
    #[arg(long)]
    remote: bool,
    #[command(flatten)]
    engine: EngineFlags,
    #[command(flatten)]
    bench: BenchFlags,
    /// Write full sweep results as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the CSV rows here (default: stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Stored sweep results (JSON) to re-render.
    #[arg(long)]
    input: PathBuf,
    /// Write the CSV rows here (default: stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Warmup loops to exclude when flattening to rows.
    #[arg(short = 'w', long, default_value_t = 1)]
    warmup_loops: usize,
    /// Platform power draw in Watts, for the efficiency column.
    #[arg(long)]
    watts: Option<f64>,
}

fn parse_threading(s: &str) -> Result<ThreadingModelKind, String> {
    match s {
        "run_to_completion" | "rtc" => Ok(ThreadingModelKind::RunToCompletion),
        "single_io_queue" | "sio" => Ok(ThreadingModelKind::SingleIoQueue),
        "shared_pool_queue" | "spq" => Ok(ThreadingModelKind::SharedPoolQueue),
        other => Err(format!(
            "unknown threading model {other:?}; expected run_to_completion, single_io_queue, \
             or shared_pool_queue"
        )),
    }
}

fn parse_buffers(s: &str) -> Result<BufferStrategyKind, String> {
    match s {
        "per_packet_object" | "object" => Ok(BufferStrategyKind::PerPacketObject),
        "preallocated_pool" | "pool" => Ok(BufferStrategyKind::PreallocatedPool),
        other => Err(format!(
            "unknown buffer strategy {other:?}; expected per_packet_object or preallocated_pool"
        )),
    }
}

fn parse_table(s: &str) -> Result<TableStrategyKind, String> {
    match s {
        "shared_locked" | "shared" => Ok(TableStrategyKind::SharedLocked),
        "sharded_per_worker" | "sharded" => Ok(TableStrategyKind::ShardedPerWorker),
        other => Err(format!(
            "unknown table strategy {other:?}; expected shared_locked or sharded_per_worker"
        )),
    }
}

/// Builds the effective (matrix, bench, watts) from defaults, file, env,
/// and flags, in that order.
fn effective_config(
    config_path: Option<&PathBuf>,
    engine_flags: Option<&EngineFlags>,
    bench_flags: Option<&BenchFlags>,
) -> Result<(StrategyMatrix, BenchConfig, Option<f64>), String> {
    let mut matrix = StrategyMatrix::default();
    let mut bench = BenchConfig::default();
    let mut watts = None;
    if let Some(path) = config_path {
        let file = config::load_file(path)?;
        file.engine.apply(&mut matrix);
        if let Some(w) = file.bench.apply(&mut bench) {
            watts = Some(w);
        }
    }
    config::apply_env(&mut matrix, &mut bench)?;
    if let Some(flags) = engine_flags {
        flags.apply(&mut matrix)?;
    }
    if let Some(flags) = bench_flags {
        if let Some(w) = flags.apply(&mut bench)? {
            watts = Some(w);
        }
    }
    log::info!(
        "effective config hash {:#018x}",
        config::effective_hash(&matrix, &bench, watts)
    );
    Ok((matrix, bench, watts))
}

/// SIGINT handling for the long-running engine: the handler only flips an
/// atomic; the run loop notices within a tick.
static SIGINT_STOP: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn on_sigint(_sig: libc::c_int) {
    if let Some(stop) = SIGINT_STOP.get() {
        stop.store(true, Ordering::SeqCst);
    }
}

fn install_sigint(stop: Arc<AtomicBool>) {
    let _ = SIGINT_STOP.set(stop);
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
    }
}

/// Entry point behind `main`; returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout (exit 0) and usage errors
            // on stderr (exit 2).
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.cmd {
        Cmd::Engine(args) => cmd_engine(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CmdError::Run(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

enum CmdError {
    /// Bad flags, bad file, invalid combination: exit 2.
    Usage(String),
    /// The run itself failed: exit 1.
    Run(String),
}

fn cmd_engine(args: EngineArgs) -> Result<i32, CmdError> {
    let (matrix, _, _) = effective_config(args.config.as_ref(), Some(&args.engine), None)
        .map_err(CmdError::Usage)?;
    matrix.validate().map_err(CmdError::Usage)?;
    let stop = Arc::new(AtomicBool::new(false));
    install_sigint(Arc::clone(&stop));
    log::info!(
        "engine: {} workers ({}), {} buffers, {} table, listening on {}:{}",
        matrix.threading.worker_count,
        matrix.threading.kind.as_str(),
        serde_variant(matrix.buffers.kind),
        serde_variant(matrix.table),
        matrix.listen_host,
        matrix.listen_port,
    );
    let report = run_engine(matrix, stop).map_err(CmdError::Run)?;
    let c = &report.counters;
    log::info!(
        "engine done: {} packet-ins, {} flow-mods, {} conns, {} protocol errors, {} table entries",
        c.packets_in, c.flow_mods, c.conns_opened, c.protocol_errors, report.table_entries
    );
    Ok(EXIT_OK)
}

fn serde_variant<T: serde::Serialize>(v: T) -> String {
    serde_json::to_value(&v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_else(|| "?".to_string())
}

fn cmd_bench(args: BenchArgs) -> Result<i32, CmdError> {
    let (_, bench, watts) = effective_config(args.config.as_ref(), None, Some(&args.bench))
        .map_err(CmdError::Usage)?;
    bench.validate().map_err(CmdError::Usage)?;
    log::info!(
        "bench: {} switches, {} macs, {} loops x {:?}, {} mode, controller {}",
        bench.switches, bench.unique_macs, bench.loops, bench.loop_duration,
        bench.mode.as_str(), bench.controller
    );
    let run = run_bench(&bench).map_err(|e| CmdError::Run(e.to_string()))?;
    let summary = aggregate_run(&run, bench.warmup_loops)
        .map_err(|e| CmdError::Run(e.to_string()))?;
    print_summary(&run, &summary, watts);
    let point = SweepPoint { axis: "bench".into(), point: 0, result: Ok(run.clone()) };
    if let Some(path) = &args.json {
        std::fs::write(path, sweep_to_json(std::slice::from_ref(&point)))
            .map_err(|e| CmdError::Run(format!("writing {}: {e}", path.display())))?;
    }
    if let Some(path) = &args.csv {
        let rows = rows_from_sweep(std::slice::from_ref(&point), bench.warmup_loops, watts);
        std::fs::write(path, to_csv(&rows))
            .map_err(|e| CmdError::Run(format!("writing {}: {e}", path.display())))?;
    }
    Ok(if run.audit.violation { EXIT_FAILURE } else { EXIT_OK })
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, CmdError> {
    let (mut matrix, bench, watts) =
        effective_config(args.config.as_ref(), Some(&args.engine), Some(&args.bench))
            .map_err(CmdError::Usage)?;
    let axis: SweepAxis = args.axis.parse().map_err(CmdError::Usage)?;
    let engine = if args.remote {
        None
    } else {
        // Co-located engines take ephemeral ports unless one was forced, so
        // points never fight over an address.
        if args.engine.port.is_none() {
            matrix.listen_port = 0;
        }
        matrix.validate().map_err(CmdError::Usage)?;
        Some(matrix)
    };
    bench.validate().map_err(CmdError::Usage)?;
    let cfg = SweepConfig { axis, points: args.points.clone(), base: bench.clone(), engine };
    let points = run_sweep(&cfg).map_err(CmdError::Usage)?;
    let mut any_violation = false;
    let mut any_ok = false;
    for p in &points {
        match &p.result {
            Ok(run) => {
                any_ok = true;
                any_violation |= run.audit.violation;
                match aggregate_run(run, bench.warmup_loops) {
                    Ok(s) => log::info!(
                        "{} {}: mean {:.0} rps over {} loops{}",
                        p.axis, p.point, s.mean_rps, s.loops_counted,
                        if run.audit.violation { " [AUDIT VIOLATION]" } else { "" }
                    ),
                    Err(e) => log::warn!("{} {}: {e}", p.axis, p.point),
                }
            }
            Err(e) => log::warn!("{} {}: failed: {e}", p.axis, p.point),
        }
    }
    if let Some(path) = &args.json {
        std::fs::write(path, sweep_to_json(&points))
            .map_err(|e| CmdError::Run(format!("writing {}: {e}", path.display())))?;
    }
    let rows = rows_from_sweep(&points, bench.warmup_loops, watts);
    let csv = to_csv(&rows);
    match &args.csv {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| CmdError::Run(format!("writing {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    if any_violation {
        return Ok(EXIT_FAILURE);
    }
    if !any_ok {
        return Err(CmdError::Run("every sweep point failed".into()));
    }
    Ok(EXIT_OK)
}

fn cmd_report(args: ReportArgs) -> Result<i32, CmdError> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CmdError::Usage(format!("reading {}: {e}", args.input.display())))?;
    let points = sweep_from_json(&text).map_err(|e| CmdError::Usage(e.to_string()))?;
    let mut any_violation = false;
    for p in &points {
        if let Ok(run) = &p.result {
            any_violation |= run.audit.violation;
            if let Ok(s) = aggregate_run(run, args.warmup_loops) {
                log::info!(
                    "{} {}: mean {:.0} rps, stddev {:.0}, {} loops",
                    p.axis, p.point, s.mean_rps, s.stddev_rps, s.loops_counted
                );
            }
        }
    }
    let rows = rows_from_sweep(&points, args.warmup_loops, args.watts);
    let csv = to_csv(&rows);
    match &args.csv {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| CmdError::Run(format!("writing {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(if any_violation { EXIT_FAILURE } else { EXIT_OK })
}

fn print_summary(run: &RunResult, summary: &RunSummary, watts: Option<f64>) {
    let link = if run.loopback { "loopback" } else { "network" };
    println!("mode: {} ({link}), {} loops counted", run.mode, summary.loops_counted);
    println!(
        "throughput: mean {:.0} rps, stddev {:.0}, min {:.0}, max {:.0}",
        summary.mean_rps, summary.stddev_rps, summary.min_rps, summary.max_rps
    );
    if let Some(cdf) = &summary.cdf {
        println!(
            "latency: p50 {} us, p99 {} us, max {} us ({} samples)",
            cdf.q(0.5), cdf.q(0.99), cdf.max(), cdf.len()
        );
    }
    println!(
        "responses: {} ({} flow-mods, {} packet-outs); audit {}",
        run.total_responses,
        run.audit.flow_mods,
        run.audit.packet_outs,
        if run.audit.violation { "VIOLATION" } else { "clean" }
    );
    if let Some(w) = watts {
        if let Ok(e) = crate::report::efficiency(summary.mean_rps, w) {
            println!("efficiency: {:.1} rps/W at {w} W", e.efficiency_rps_per_w);
        }
    }
    if let Some(p) = &summary.phase {
        println!(
            "phase profile (sampled {}): decode {:.1}%, app {:.1}%, encode {:.1}%, io {:.1}%, \
             unattributed {:.1}%",
            p.sampled_packets,
            100.0 * p.decode,
            100.0 * p.app,
            100.0 * p.encode,
            100.0 * p.io,
            100.0 * p.unattributed
        );
    }
    if run.reconnects > 0 {
        println!("warning: {} connection losses during the run", run.reconnects);
    }
}
