//! The controller engine: accepts switch connections, runs the OpenFlow
//! handshake, and answers every packet-in with exactly one flow-mod, under a
//! configurable combination of threading model, buffer strategy, and MAC
//! table layout.
//!
//! The three threading models:
//!
//! - [`ThreadingModelKind::RunToCompletion`]: a connection is handled start
//!   to finish on one worker thread — read, decode, decide, encode, write,
//!   no per-packet thread crossings. Connections are assigned by datapath id
//!   so a worker can own a private table shard.
//! - [`ThreadingModelKind::SingleIoQueue`]: one IO thread owns every socket
//!   and shuttles work batches to a worker pool over bounded queues; replies
//!   come back over a queue to be written by the IO thread. Every packet
//!   crosses threads twice.
//! - [`ThreadingModelKind::SharedPoolQueue`]: workers share one poller
//!   behind a mutex — only one thread can be in the event wait at a time —
//!   and pull connections from a shared slot table guarded by per-connection
//!   locks.
//!
//! Strategy pairing is validated up front: the queued models dispatch a
//! datapath's packets to whichever worker is free, so they cannot guarantee
//! the exclusive shard ownership the sharded table relies on and must run
//! with the locked shared table.

pub mod affinity;
pub mod conn;
pub mod counters;
mod rtc;
mod shared_pool;
mod single_io;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::bufferpool::BufferStrategy;
use crate::learnswitch::TableStrategyKind;
pub use counters::{CounterRegistry, CountersSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadingModelKind {
    RunToCompletion,
    SingleIoQueue,
    SharedPoolQueue,
}

impl ThreadingModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ThreadingModelKind::RunToCompletion => "run_to_completion",
            ThreadingModelKind::SingleIoQueue => "single_io_queue",
            ThreadingModelKind::SharedPoolQueue => "shared_pool_queue",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadingModel {
    pub kind: ThreadingModelKind,
    /// Worker threads. The single-IO-queue model runs one extra IO thread on
    /// top of these.
    pub worker_count: usize,
    /// Pin each worker to core `index mod available_cores`.
    pub pin_threads: bool,
}

impl Default for ThreadingModel {
    fn default() -> ThreadingModel {
        ThreadingModel {
            kind: ThreadingModelKind::RunToCompletion,
            worker_count: affinity::available_cores(),
            pin_threads: false,
        }
    }
}

/// The full strategy selection for one engine instance. Every run of the
/// engine is described by one of these values, and reports carry it so a
/// measurement can always be traced to its configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyMatrix {
    pub threading: ThreadingModel,
    pub buffers: BufferStrategy,
    pub table: TableStrategyKind,
    pub listen_port: u16,
    /// Bind address; loopback by default.
    #[serde(default = "default_listen_host")]
    pub listen_host: String,
    /// Stripe count for the shared table (power of two).
    #[serde(default = "default_stripes")]
    pub table_stripes: usize,
    /// Sample one packet in 2^shift for phase timing.
    #[serde(default = "default_sampling_shift")]
    pub sampling_shift: u32,
    /// Bounded queue capacity (work items) for the queued models.
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
}

fn default_listen_host() -> String {
    "127.0.0.1".to_string()
}
fn default_stripes() -> usize {
    crate::learnswitch::DEFAULT_STRIPE_COUNT
}
fn default_sampling_shift() -> u32 {
    6
}
fn default_queue_capacity() -> usize {
    1024
}

impl Default for StrategyMatrix {
    fn default() -> StrategyMatrix {
        StrategyMatrix {
            threading: ThreadingModel::default(),
            buffers: BufferStrategy::default(),
            table: TableStrategyKind::ShardedPerWorker,
            listen_port: crate::DEFAULT_OPENFLOW_PORT,
            listen_host: default_listen_host(),
            table_stripes: default_stripes(),
            sampling_shift: default_sampling_shift(),
            queue_capacity: default_queue_capacity(),
        }
    }
}

impl StrategyMatrix {
    /// Rejects unbuildable combinations rather than letting them produce
    /// silently wrong measurements.
    pub fn validate(&self) -> Result<(), String> {
        if self.threading.worker_count == 0 || self.threading.worker_count > 1024 {
            return Err(format!(
                "worker_count must be in 1..=1024, got {}",
                self.threading.worker_count
            ));
        }
        self.buffers.validate()?;
        if !self.table_stripes.is_power_of_two() {
            return Err(format!("table_stripes must be a power of two, got {}", self.table_stripes));
        }
        if self.queue_capacity == 0 {
            return Err("queue_capacity must be nonzero".to_string());
        }
        match (self.threading.kind, self.table) {
            (ThreadingModelKind::RunToCompletion, _) => Ok(()),
            (_, TableStrategyKind::SharedLocked) => Ok(()),
            (kind, TableStrategyKind::ShardedPerWorker) => Err(format!(
                "threading model {} dispatches a datapath's packets to arbitrary workers and \
                 cannot guarantee shard ownership; use the shared_locked table",
                kind.as_str()
            )),
        }
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, String> {
        format!("{}:{}", self.listen_host, self.listen_port)
            .parse()
            .map_err(|e| format!("bad listen address: {e}"))
    }

    pub fn sample_mask(&self) -> u64 {
        (1u64 << self.sampling_shift.min(63)) - 1
    }
}

/// What an engine reports when it shuts down.
#[derive(Debug, Clone)]
pub struct EngineReport {
    pub counters: CountersSnapshot,
    /// Total learned MAC entries at shutdown (both table strategies).
    pub table_entries: u64,
}

/// Per-thread final state returned through join.
pub(crate) struct ThreadFinal {
    pub shard_entries: u64,
}

/// What each threading model's `spawn` hands back: the running threads and
/// the wakers that kick their event loops out of a poll wait at shutdown.
pub(crate) type SpawnedThreads = (Vec<std::thread::JoinHandle<ThreadFinal>>, Vec<Arc<mio::Waker>>);

/// Shared state between the engine's threads and its handle.
pub(crate) struct EngineShared {
    pub shutdown: AtomicBool,
    pub counters: CounterRegistry,
    pub matrix: StrategyMatrix,
    pub shared_table: Option<Arc<crate::learnswitch::SharedTable>>,
}

/// A running engine. Dropping the handle without calling [`EngineHandle::shutdown`]
/// aborts the threads ungracefully (they notice the flag at the next tick).
pub struct EngineHandle {
    shared: Arc<EngineShared>,
    local_addr: SocketAddr,
    threads: Vec<JoinHandle<ThreadFinal>>,
    /// Wakers to kick every event loop out of its poll wait at shutdown.
    wakers: Vec<Arc<mio::Waker>>,
}

impl EngineHandle {
    /// Address actually bound (resolves port 0 to the ephemeral port).
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Live counter totals; callable at any time from any thread.
    pub fn snapshot(&self) -> CountersSnapshot {
        let mut snap = self.shared.counters.snapshot();
        if let Some(table) = &self.shared.shared_table {
            snap.lock_acquisitions = table.lock_acquisitions();
            snap.table_entries = Some(table.len() as u64);
        }
        snap
    }

    /// Signals every thread to stop, joins them, and returns the final
    /// counter totals plus table sizes (including per-worker shards, which
    /// are only countable once their owners exit).
    pub fn shutdown(self) -> EngineReport {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for waker in &self.wakers {
            let _ = waker.wake();
        }
        let mut shard_entries = 0u64;
        for t in self.threads {
            match t.join() {
                Ok(f) => shard_entries += f.shard_entries,
                Err(e) => std::panic::resume_unwind(e),
            }
        }
        let mut counters = self.shared.counters.snapshot();
        let table_entries = match &self.shared.shared_table {
            Some(table) => {
                counters.lock_acquisitions = table.lock_acquisitions();
                table.len() as u64
            }
            None => shard_entries,
        };
        counters.table_entries = Some(table_entries);
        EngineReport { counters, table_entries }
    }
}

/// Builds and starts an engine per `matrix`, returning once the listener is
/// bound and accepting. `matrix.listen_port` may be 0 to take an ephemeral
/// port (see [`EngineHandle::local_addr`]).
pub fn spawn_engine(matrix: StrategyMatrix) -> Result<EngineHandle, String> {
    matrix.validate()?;
    let addr = matrix.listen_addr()?;
    let listener = std::net::TcpListener::bind(addr)
        .map_err(|e| format!("cannot bind {addr}: {e}"))?;
    listener.set_nonblocking(true).map_err(|e| format!("set_nonblocking: {e}"))?;
    let local_addr = listener.local_addr().map_err(|e| format!("local_addr: {e}"))?;
    let listener = mio::net::TcpListener::from_std(listener);

    let shared_table = match matrix.table {
        TableStrategyKind::SharedLocked => {
            Some(Arc::new(crate::learnswitch::SharedTable::new(matrix.table_stripes)))
        }
        TableStrategyKind::ShardedPerWorker => None,
    };
    // Thread 0 is the IO/acceptor thread where one exists; workers follow.
    let thread_count = match matrix.threading.kind {
        ThreadingModelKind::RunToCompletion => matrix.threading.worker_count + 1,
        ThreadingModelKind::SingleIoQueue => matrix.threading.worker_count + 1,
        ThreadingModelKind::SharedPoolQueue => matrix.threading.worker_count,
    };
    let shared = Arc::new(EngineShared {
        shutdown: AtomicBool::new(false),
        counters: CounterRegistry::new(thread_count),
        matrix: matrix.clone(),
        shared_table,
    });

    let (threads, wakers) = match matrix.threading.kind {
        ThreadingModelKind::RunToCompletion => rtc::spawn(Arc::clone(&shared), listener)?,
        ThreadingModelKind::SingleIoQueue => single_io::spawn(Arc::clone(&shared), listener)?,
        ThreadingModelKind::SharedPoolQueue => shared_pool::spawn(Arc::clone(&shared), listener)?,
    };

    log::info!(
        "engine up on {local_addr}: model={} workers={} buffers={:?} table={:?}",
        matrix.threading.kind.as_str(),
        matrix.threading.worker_count,
        matrix.buffers.kind,
        matrix.table,
    );
    Ok(EngineHandle { shared, local_addr, threads, wakers })
}

/// Runs an engine in the foreground until `stop` flips (the CLI wires this
/// to SIGINT), then returns the final report.
pub fn run_engine(matrix: StrategyMatrix, stop: Arc<AtomicBool>) -> Result<EngineReport, String> {
    let handle = spawn_engine(matrix)?;
    log::info!("listening on {}", handle.local_addr());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    Ok(handle.shutdown())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bufferpool::BufferStrategyKind;

    #[test]
    fn strategy_matrix_default_is_valid() {
        StrategyMatrix::default().validate().unwrap();
    }

    #[test]
    fn queued_models_reject_the_sharded_table() {
        for kind in [ThreadingModelKind::SingleIoQueue, ThreadingModelKind::SharedPoolQueue] {
            let mut m = StrategyMatrix::default();
            m.threading.kind = kind;
            m.table = TableStrategyKind::ShardedPerWorker;
            assert!(m.validate().is_err(), "{kind:?} must not pair with sharded table");
            m.table = TableStrategyKind::SharedLocked;
            m.validate().unwrap();
        }
    }

    #[test]
    fn run_to_completion_accepts_both_tables() {
        for table in [TableStrategyKind::SharedLocked, TableStrategyKind::ShardedPerWorker] {
            let m = StrategyMatrix { table, ..StrategyMatrix::default() };
            m.validate().unwrap();
        }
    }

    #[test]
    fn degenerate_worker_counts_are_rejected() {
        let mut m = StrategyMatrix::default();
        m.threading.worker_count = 0;
        assert!(m.validate().is_err());
        m.threading.worker_count = 4096;
        assert!(m.validate().is_err());
    }

    #[test]
    fn sample_mask_matches_shift() {
        let mut m = StrategyMatrix { sampling_shift: 6, ..Default::default() };
        assert_eq!(m.sample_mask(), 63);
        m.sampling_shift = 0;
        assert_eq!(m.sample_mask(), 0); // sample everything
    }

    #[test]
    fn matrix_serializes_round_trip() {
        let m = StrategyMatrix {
            threading: ThreadingModel {
                kind: ThreadingModelKind::SingleIoQueue,
                worker_count: 8,
                pin_threads: true,
            },
            buffers: crate::bufferpool::BufferStrategy::per_packet(),
            table: TableStrategyKind::SharedLocked,
            listen_port: 6633,
            ..StrategyMatrix::default()
        };
        let json = serde_json::to_string(&m).unwrap();
        let back: StrategyMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back.threading, m.threading);
        assert_eq!(back.buffers.kind, BufferStrategyKind::PerPacketObject);
        assert_eq!(back.listen_port, 6633);
    }
}
