//! Axis sweeps: one full measurement per point along concurrency (engine
//! worker threads), heterogeneity (unique MACs per switch), or connectivity
//! (switch count), everything else held at the base configuration.
//!
//! When the engine is co-located, each point gets a freshly spawned engine on
//! an ephemeral port and a full teardown afterwards, so points cannot
//! contaminate each other through warmed MAC tables or leaked ports. Against
//! a remote engine the sweep only varies emulator-side parameters; the
//! concurrency axis is rejected because a remote engine's thread count is
//! not ours to change.

use serde::{Deserialize, Serialize};

use crate::engine::{spawn_engine, StrategyMatrix};

use super::{run_bench, BenchConfig, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Engine worker threads.
    Concurrency,
    /// Unique source MACs per switch.
    Heterogeneity,
    /// Emulated switch count.
    Connectivity,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Concurrency => "concurrency",
            SweepAxis::Heterogeneity => "heterogeneity",
            SweepAxis::Connectivity => "connectivity",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<SweepAxis, String> {
        match s {
            "concurrency" => Ok(SweepAxis::Concurrency),
            "heterogeneity" => Ok(SweepAxis::Heterogeneity),
            "connectivity" => Ok(SweepAxis::Connectivity),
            other => Err(format!(
                "unknown axis {other:?}; expected concurrency, heterogeneity, or connectivity"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub points: Vec<u64>,
    pub base: BenchConfig,
    /// Engine strategy for a co-located sweep. `None` benchmarks whatever
    /// listens at `base.controller` instead.
    pub engine: Option<StrategyMatrix>,
}

/// One sweep point's outcome. Failures are carried per point so a crashed
/// point does not abort the rest of the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub point: u64,
    pub result: Result<RunResult, String>,
}

/// Runs the full sweep, one measurement per point, in the given order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepPoint>, String> {
    if cfg.points.is_empty() {
        return Err("sweep needs at least one point".into());
    }
    if cfg.axis == SweepAxis::Concurrency && cfg.engine.is_none() {
        return Err(
            "the concurrency axis varies engine worker threads and requires a co-located \
             engine; pass an engine strategy or choose another axis"
                .into(),
        );
    }
    let mut out = Vec::with_capacity(cfg.points.len());
    for &point in &cfg.points {
        out.push(SweepPoint {
            axis: cfg.axis.as_str().to_string(),
            point,
            result: run_point(cfg, point),
        });
    }
    Ok(out)
}

fn run_point(cfg: &SweepConfig, point: u64) -> Result<RunResult, String> {
    let mut bench = cfg.base.clone();
    let mut matrix = cfg.engine.clone();
    match cfg.axis {
        SweepAxis::Concurrency => {
            let m = matrix.as_mut().expect("checked by run_sweep");
            m.threading.worker_count = point
                .try_into()
                .map_err(|_| format!("worker count {point} out of range"))?;
        }
        SweepAxis::Heterogeneity => bench.unique_macs = point,
        SweepAxis::Connectivity => {
            bench.switches =
                point.try_into().map_err(|_| format!("switch count {point} out of range"))?;
        }
    }
    match matrix {
        Some(matrix) => {
            let engine = spawn_engine(matrix).map_err(|e| format!("engine spawn: {e}"))?;
            bench.controller = engine.local_addr().to_string();
            let before = engine.snapshot();
            let run = run_bench(&bench);
            let after = engine.snapshot();
            let report = engine.shutdown();
            let mut run = run.map_err(|e| e.to_string())?;
            let mut delta = after.delta_since(&before);
            // Table size is a level, not a rate: report the final value.
            delta.table_entries = Some(report.table_entries);
            delta.lock_acquisitions = after.lock_acquisitions - before.lock_acquisitions;
            run.engine_counters = Some(delta);
            Ok(run)
        }
        None => run_bench(&bench).map_err(|e| e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchMode;
    use std::time::Duration;

    fn tiny_base() -> BenchConfig {
        BenchConfig {
            switches: 2,
            unique_macs: 50,
            worker_threads: 1,
            loops: 1,
            loop_duration: Duration::from_millis(100),
            mode: BenchMode::Throughput,
            warmup_loops: 0,
            ..BenchConfig::default()
        }
    }

    fn tiny_matrix() -> StrategyMatrix {
        StrategyMatrix {
            listen_port: 0,
            threading: crate::engine::ThreadingModel {
                worker_count: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn concurrency_axis_requires_a_co_located_engine() {
        let cfg = SweepConfig {
            axis: SweepAxis::Concurrency,
            points: vec![1, 2],
            base: tiny_base(),
            engine: None,
        };
        let err = run_sweep(&cfg).unwrap_err();
        assert!(err.contains("co-located"), "unhelpful error: {err}");
    }

    #[test]
    fn empty_points_are_rejected() {
        let cfg = SweepConfig {
            axis: SweepAxis::Connectivity,
            points: vec![],
            base: tiny_base(),
            engine: Some(tiny_matrix()),
        };
        assert!(run_sweep(&cfg).is_err());
    }

    #[test]
    fn connectivity_sweep_runs_each_point_with_a_fresh_engine() {
        let cfg = SweepConfig {
            axis: SweepAxis::Connectivity,
            points: vec![1, 2],
            base: tiny_base(),
            engine: Some(tiny_matrix()),
        };
        let points = run_sweep(&cfg).unwrap();
        assert_eq!(points.len(), 2);
        for (i, p) in points.iter().enumerate() {
            assert_eq!(p.axis, "connectivity");
            assert_eq!(p.point, cfg.points[i]);
            let run = p.result.as_ref().expect("point should succeed");
            assert!(run.total_responses > 0);
            let engine = run.engine_counters.as_ref().expect("co-located run attaches counters");
            assert_eq!(engine.flow_mods, engine.packets_in);
            // Each switch cycles 50 unique MACs; the table can hold at most
            // point × 50 entries.
            assert!(engine.table_entries.unwrap() <= cfg.points[i] * 50);
        }
        // Both engines were torn down: their ports are rebindable. (They were
        // ephemeral and distinct; nothing should still be listening.)
    }

    #[test]
    fn failed_points_do_not_abort_the_sweep() {
        let mut base = tiny_base();
        // An unreachable controller makes every point fail benchside; a
        // short readiness deadline keeps the failure quick.
        base.controller = "127.0.0.1:1".into();
        base.ready_timeout = Duration::from_millis(300);
        let cfg = SweepConfig {
            axis: SweepAxis::Heterogeneity,
            points: vec![10, 20],
            base,
            engine: None,
        };
        let points = run_sweep(&cfg).unwrap();
        assert_eq!(points.len(), 2);
        for p in &points {
            assert!(p.result.is_err());
        }
    }
}
