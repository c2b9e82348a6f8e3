//! Configuration file loading and layering.
//!
//! Precedence, lowest to highest: built-in defaults, the TOML config file,
//! environment variables (`OFBENCH_PORT`, `OFBENCH_CONTROLLER`), then
//! command-line flags. Every layer overrides field-wise, so a file plus a
//! flag is exactly the same effective configuration as passing both flags —
//! the logged config hash makes that checkable.

use std::hash::{Hash, Hasher};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bench::{BenchConfig, BenchMode};
use crate::bufferpool::BufferStrategyKind;
use crate::engine::{StrategyMatrix, ThreadingModelKind};
use crate::learnswitch::TableStrategyKind;

/// Environment variable overriding the engine listen port and the default
/// controller port.
pub const ENV_PORT: &str = "OFBENCH_PORT";
/// Environment variable overriding the benchmark's controller address.
pub const ENV_CONTROLLER: &str = "OFBENCH_CONTROLLER";

/// The TOML config file: `[engine]` and `[bench]` sections, every key
/// optional. Unknown keys are rejected so typos fail loudly instead of
/// silently running defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    /// `run_to_completion`, `single_io_queue`, or `shared_pool_queue`.
    pub threading: Option<ThreadingModelKind>,
    pub workers: Option<usize>,
    pub pin_threads: Option<bool>,
    /// `per_packet_object` or `preallocated_pool`.
    pub buffers: Option<BufferStrategyKind>,
    pub pool_buffer_size: Option<usize>,
    pub pool_depth: Option<usize>,
    /// `shared_locked` or `sharded_per_worker`.
    pub table: Option<TableStrategyKind>,
    pub port: Option<u16>,
    pub host: Option<String>,
    pub table_stripes: Option<usize>,
    pub sampling_shift: Option<u32>,
    pub queue_capacity: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub controller: Option<String>,
    pub switches: Option<usize>,
    pub macs: Option<u64>,
    pub threads: Option<usize>,
    pub loops: Option<usize>,
    pub ms_per_loop: Option<u64>,
    pub delay_ms: Option<u64>,
    /// `latency` or `throughput`.
    pub mode: Option<BenchMode>,
    pub warmup_loops: Option<usize>,
    pub window_bytes: Option<usize>,
    /// Operator-measured platform power draw, for the efficiency column.
    pub watts: Option<f64>,
}

/// Parses a config file's contents.
pub fn parse_file(text: &str) -> Result<FileConfig, String> {
    toml::from_str(text).map_err(|e| format!("config file: {e}"))
}

/// Loads and parses a config file.
pub fn load_file(path: &std::path::Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("reading {}: {e}", path.display()))?;
    parse_file(&text)
}

impl EngineSection {
    /// Overlays this section's set fields onto `matrix`.
    pub fn apply(&self, matrix: &mut StrategyMatrix) {
        if let Some(v) = self.threading {
            matrix.threading.kind = v;
        }
        if let Some(v) = self.workers {
            matrix.threading.worker_count = v;
        }
        if let Some(v) = self.pin_threads {
            matrix.threading.pin_threads = v;
        }
        if let Some(v) = self.buffers {
            matrix.buffers.kind = v;
        }
        if let Some(v) = self.pool_buffer_size {
            matrix.buffers.pool_buffer_size = v;
        }
        if let Some(v) = self.pool_depth {
            matrix.buffers.pool_depth = v;
        }
        if let Some(v) = self.table {
            matrix.table = v;
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
    }
}

impl BenchSection {
    /// Overlays this section's set fields onto `bench`. Returns the watts
    /// figure separately — it belongs to reporting, not the measurement.
    pub fn apply(&self, bench: &mut BenchConfig) -> Option<f64> {
        if let Some(v) = &self.controller {
            bench.controller = v.clone();
        }
        if let Some(v) = self.switches {
            bench.switches = v;
        }
        if let Some(v) = self.macs {
            bench.unique_macs = v;
        }
        if let Some(v) = self.threads {
            bench.worker_threads = v;
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
        if let Some(v) = self.mode {
            bench.mode = v;
        }
        if let Some(v) = self.warmup_loops {
            bench.warmup_loops = v;
        }
        if let Some(v) = self.window_bytes {
            bench.window_bytes = v;
        }
        self.watts
    }
}

/// Applies `OFBENCH_PORT` and `OFBENCH_CONTROLLER` from the environment.
pub fn apply_env(matrix: &mut StrategyMatrix, bench: &mut BenchConfig) -> Result<(), String> {
    if let Ok(port) = std::env::var(ENV_PORT) {
        let port: u16 = port.parse().map_err(|e| format!("{ENV_PORT}={port:?}: {e}"))?;
        matrix.listen_port = port;
    }
    if let Ok(controller) = std::env::var(ENV_CONTROLLER) {
        if controller.parse::<std::net::SocketAddr>().is_err() {
            return Err(format!("{ENV_CONTROLLER}={controller:?} is not host:port"));
        }
        bench.controller = controller;
    }
    Ok(())
}

/// Stable-within-a-binary fingerprint of the effective configuration, logged
/// so "file + overrides" and "pure flags" can be checked for equivalence.
pub fn effective_hash(matrix: &StrategyMatrix, bench: &BenchConfig, watts: Option<f64>) -> u64 {
    let mut h = std::hash::DefaultHasher::new();
    // Debug formatting covers every field of both structs; any drift in
    // either shows up as a different hash.
    format!("{matrix:?}|{bench:?}|{watts:?}").hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_changes_nothing() {
        let file = parse_file("").unwrap();
        let mut matrix = StrategyMatrix::default();
        let mut bench = BenchConfig::default();
        let before = effective_hash(&matrix, &bench, None);
        file.engine.apply(&mut matrix);
        let watts = file.bench.apply(&mut bench);
        assert_eq!(effective_hash(&matrix, &bench, watts), before);
    }

    #[test]
    fn file_fields_overlay_defaults() {
        let file = parse_file(
            r#"
            [engine]
            threading = "single_io_queue"
            workers = 3
            buffers = "per_packet_object"
            table = "shared_locked"
            port = 7700

            [bench]
            switches = 16
            macs = 1000
            mode = "throughput"
            ms_per_loop = 250
            watts = 150.0
            "#,
        )
        .unwrap();
        let mut matrix = StrategyMatrix::default();
        let mut bench = BenchConfig::default();
        file.engine.apply(&mut matrix);
        let watts = file.bench.apply(&mut bench);
        assert_eq!(matrix.threading.kind, ThreadingModelKind::SingleIoQueue);
        assert_eq!(matrix.threading.worker_count, 3);
        assert_eq!(matrix.buffers.kind, BufferStrategyKind::PerPacketObject);
        assert_eq!(matrix.table, TableStrategyKind::SharedLocked);
        assert_eq!(matrix.listen_port, 7700);
        assert_eq!(bench.switches, 16);
        assert_eq!(bench.unique_macs, 1000);
        assert_eq!(bench.mode, BenchMode::Throughput);
        assert_eq!(bench.loop_duration, Duration::from_millis(250));
        assert_eq!(watts, Some(150.0));
        // Untouched fields keep their defaults.
        assert_eq!(bench.loops, 10);
        assert_eq!(matrix.table_stripes, crate::learnswitch::DEFAULT_STRIPE_COUNT);
    }

    #[test]
    fn unknown_keys_fail_loudly() {
        let err = parse_file("[engine]\nworker_count = 4\n").unwrap_err();
        assert!(err.contains("worker_count"), "error should name the bad key: {err}");
    }

    #[test]
    fn file_plus_override_equals_pure_flags() {
        // Layering a file and then a flag-style override must land on the
        // same effective config (and hash) as setting both directly.
        let file = parse_file("[bench]\nswitches = 8\n").unwrap();
        let mut matrix_a = StrategyMatrix::default();
        let mut bench_a = BenchConfig::default();
        file.bench.apply(&mut bench_a);
        bench_a.loops = 3; // the "flag"

        let bench_b = BenchConfig { switches: 8, loops: 3, ..BenchConfig::default() };
        let matrix_b = StrategyMatrix::default();

        assert_eq!(
            effective_hash(&matrix_a, &bench_a, None),
            effective_hash(&matrix_b, &bench_b, None)
        );
        file.engine.apply(&mut matrix_a); // empty section: still equal
        assert_eq!(
            effective_hash(&matrix_a, &bench_a, None),
            effective_hash(&matrix_b, &bench_b, None)
        );
    }

    #[test]
    fn hash_differs_when_any_field_differs() {
        let matrix = StrategyMatrix::default();
        let bench = BenchConfig::default();
        let base = effective_hash(&matrix, &bench, None);
        let mut other = bench.clone();
        other.unique_macs += 1;
        assert_ne!(effective_hash(&matrix, &other, None), base);
        assert_ne!(effective_hash(&matrix, &bench, Some(150.0)), base);
    }

    #[test]
    fn env_overrides_port_and_controller() {
        // Serialized via a lock-free convention: this test is the only one
        // touching these variables.
        std::env::set_var(ENV_PORT, "7001");
        std::env::set_var(ENV_CONTROLLER, "10.0.0.7:6633");
        let mut matrix = StrategyMatrix::default();
        let mut bench = BenchConfig::default();
        apply_env(&mut matrix, &mut bench).unwrap();
        assert_eq!(matrix.listen_port, 7001);
        assert_eq!(bench.controller, "10.0.0.7:6633");

        std::env::set_var(ENV_CONTROLLER, "not-an-address");
        assert!(apply_env(&mut matrix, &mut bench).is_err());
        std::env::remove_var(ENV_PORT);
        std::env::remove_var(ENV_CONTROLLER);
    }
}
