//! Per-worker instrumentation counters and phase-timing samples.
//!
//! Every engine thread owns one [`WorkerCounters`] block (cache-padded so
//! threads never false-share a line) and updates it with relaxed atomics —
//! cheap enough to leave on unconditionally. Snapshots sum across threads and
//! can be taken live, which is how the harness computes per-loop deltas when
//! engine and harness share a process.
//!
//! Phase timing is sampled, not exhaustive: one packet in 2^shift gets
//! monotonic-clock stamps around decode, table work, and encode, plus an
//! estimated share of the socket-write call that flushed its reply (the
//! write is batched, so the sampled packet is charged
//! `flush_duration × reply_len / bytes_flushed`). The gap between a sample's
//! total wall time and its attributed phases — queue waits, batch waits,
//! event-loop overhead — is reported as *unattributed* rather than smeared
//! into the phases.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_utils::CachePadded;
use serde::{Deserialize, Serialize};

/// Relaxed is sufficient everywhere here: counters are statistics, merged
/// after (or independently of) the work they describe.
const R: Ordering = Ordering::Relaxed;

#[derive(Debug, Default)]
pub struct WorkerCounters {
    /// Packet-ins fully processed (decision made, reply produced).
    pub packets_in: AtomicU64,
    pub flow_mods: AtomicU64,
    pub packet_outs: AtomicU64,
    /// Per-packet thread crossings: a batch of k frames handed to another
    /// thread counts k, and its reply counts k again.
    pub handoffs: AtomicU64,
    pub allocations: AtomicU64,
    pub bytes_copied: AtomicU64,
    pub buffer_reuses: AtomicU64,
    pub conns_opened: AtomicU64,
    pub conns_closed: AtomicU64,
    /// Connections closed because the peer broke protocol (bad framing,
    /// bad version, out-of-phase message, undecodable body).
    pub protocol_errors: AtomicU64,
    pub decode_ns: AtomicU64,
    pub app_ns: AtomicU64,
    pub encode_ns: AtomicU64,
    pub io_ns: AtomicU64,
    /// Total wall time of sampled packets (frame recognized → reply flush).
    pub window_ns: AtomicU64,
    pub sampled_packets: AtomicU64,
}

impl WorkerCounters {
    pub fn add_alloc_stats(&self, delta: crate::bufferpool::AllocStats) {
        if delta.allocations > 0 {
            self.allocations.fetch_add(delta.allocations, R);
        }
        if delta.bytes_copied > 0 {
            self.bytes_copied.fetch_add(delta.bytes_copied, R);
        }
        if delta.buffer_reuses > 0 {
            self.buffer_reuses.fetch_add(delta.buffer_reuses, R);
        }
    }
}

/// One in-flight phase-timing sample, created when a sampled packet's frame
/// is recognized and committed when its reply hits the socket.
#[derive(Debug, Clone, Copy)]
pub struct PhaseSample {
    pub started: Instant,
    pub decode_ns: u64,
    pub app_ns: u64,
    pub encode_ns: u64,
    pub reply_len: u32,
}

impl PhaseSample {
    pub fn start() -> PhaseSample {
        PhaseSample { started: Instant::now(), decode_ns: 0, app_ns: 0, encode_ns: 0, reply_len: 0 }
    }

    /// Folds the sample into `counters`, attributing to the io phase this
    /// packet's pro-rata share of the flush that carried its reply.
    pub fn commit(self, counters: &WorkerCounters, flush_ns: u64, bytes_flushed: u64) {
        let window = self.started.elapsed().as_nanos() as u64;
        let io_ns = flush_ns
            .saturating_mul(u64::from(self.reply_len))
            .checked_div(bytes_flushed)
            .unwrap_or(0);
        counters.decode_ns.fetch_add(self.decode_ns, R);
        counters.app_ns.fetch_add(self.app_ns, R);
        counters.encode_ns.fetch_add(self.encode_ns, R);
        counters.io_ns.fetch_add(io_ns, R);
        counters.window_ns.fetch_add(window, R);
        counters.sampled_packets.fetch_add(1, R);
    }
}

/// The registry of per-thread counter blocks for one engine instance.
#[derive(Clone)]
pub struct CounterRegistry {
    blocks: Arc<Vec<CachePadded<WorkerCounters>>>,
}

impl CounterRegistry {
    pub fn new(threads: usize) -> CounterRegistry {
        CounterRegistry {
            blocks: Arc::new((0..threads).map(|_| CachePadded::new(WorkerCounters::default())).collect()),
        }
    }

    pub fn thread(&self, index: usize) -> &WorkerCounters {
        &self.blocks[index]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn snapshot(&self) -> CountersSnapshot {
        let mut s = CountersSnapshot::default();
        for b in self.blocks.iter() {
            s.packets_in += b.packets_in.load(R);
            s.flow_mods += b.flow_mods.load(R);
            s.packet_outs += b.packet_outs.load(R);
            s.handoffs += b.handoffs.load(R);
            s.allocations += b.allocations.load(R);
            s.bytes_copied += b.bytes_copied.load(R);
            s.buffer_reuses += b.buffer_reuses.load(R);
            s.conns_opened += b.conns_opened.load(R);
            s.conns_closed += b.conns_closed.load(R);
            s.protocol_errors += b.protocol_errors.load(R);
            s.decode_ns += b.decode_ns.load(R);
            s.app_ns += b.app_ns.load(R);
            s.encode_ns += b.encode_ns.load(R);
            s.io_ns += b.io_ns.load(R);
            s.window_ns += b.window_ns.load(R);
            s.sampled_packets += b.sampled_packets.load(R);
        }
        s
    }
}

/// Point-in-time sum of every thread's counters, plus table-level figures
/// filled in by whoever owns the table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CountersSnapshot {
    pub packets_in: u64,
    pub flow_mods: u64,
    pub packet_outs: u64,
    pub handoffs: u64,
    pub allocations: u64,
    pub bytes_copied: u64,
    pub buffer_reuses: u64,
    pub conns_opened: u64,
    pub conns_closed: u64,
    pub protocol_errors: u64,
    pub decode_ns: u64,
    pub app_ns: u64,
    pub encode_ns: u64,
    pub io_ns: u64,
    pub window_ns: u64,
    pub sampled_packets: u64,
    /// Stripe-lock acquisitions on the MAC table's packet path; zero by
    /// construction under the sharded strategy.
    pub lock_acquisitions: u64,
    /// Learned entries; known live for the shared table, only at shutdown
    /// for the sharded one (each worker owns its shard until it exits).
    pub table_entries: Option<u64>,
}

impl CountersSnapshot {
    /// Component-wise `self - earlier`, for per-loop deltas.
    pub fn delta_since(&self, earlier: &CountersSnapshot) -> CountersSnapshot {
        CountersSnapshot {
            packets_in: self.packets_in - earlier.packets_in,
            flow_mods: self.flow_mods - earlier.flow_mods,
            packet_outs: self.packet_outs - earlier.packet_outs,
            handoffs: self.handoffs - earlier.handoffs,
            allocations: self.allocations - earlier.allocations,
            bytes_copied: self.bytes_copied - earlier.bytes_copied,
            buffer_reuses: self.buffer_reuses - earlier.buffer_reuses,
            conns_opened: self.conns_opened - earlier.conns_opened,
            conns_closed: self.conns_closed - earlier.conns_closed,
            protocol_errors: self.protocol_errors - earlier.protocol_errors,
            decode_ns: self.decode_ns - earlier.decode_ns,
            app_ns: self.app_ns - earlier.app_ns,
            encode_ns: self.encode_ns - earlier.encode_ns,
            io_ns: self.io_ns - earlier.io_ns,
            window_ns: self.window_ns - earlier.window_ns,
            sampled_packets: self.sampled_packets - earlier.sampled_packets,
            lock_acquisitions: self.lock_acquisitions - earlier.lock_acquisitions,
            table_entries: self.table_entries,
        }
    }
}

/// Tracks the last pushed [`crate::bufferpool::AllocStats`] so a worker can
/// fold its (non-atomic, worker-confined) pool stats into its atomic counter
/// block once per event batch instead of per operation.
#[derive(Debug, Default, Clone, Copy)]
pub struct AllocStatsSync {
    last: crate::bufferpool::AllocStats,
}

impl AllocStatsSync {
    pub fn push(&mut self, current: crate::bufferpool::AllocStats, counters: &WorkerCounters) {
        counters.add_alloc_stats(crate::bufferpool::AllocStats {
            allocations: current.allocations - self.last.allocations,
            bytes_copied: current.bytes_copied - self.last.bytes_copied,
            buffer_reuses: current.buffer_reuses - self.last.buffer_reuses,
        });
        self.last = current;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_sums_across_threads() {
        let reg = CounterRegistry::new(3);
        reg.thread(0).packets_in.fetch_add(5, R);
        reg.thread(1).packets_in.fetch_add(7, R);
        reg.thread(2).flow_mods.fetch_add(2, R);
        let s = reg.snapshot();
        assert_eq!(s.packets_in, 12);
        assert_eq!(s.flow_mods, 2);
    }

    #[test]
    fn delta_since_subtracts_componentwise() {
        let reg = CounterRegistry::new(1);
        reg.thread(0).packets_in.fetch_add(10, R);
        let a = reg.snapshot();
        reg.thread(0).packets_in.fetch_add(4, R);
        reg.thread(0).handoffs.fetch_add(8, R);
        let b = reg.snapshot();
        let d = b.delta_since(&a);
        assert_eq!(d.packets_in, 4);
        assert_eq!(d.handoffs, 8);
    }

    #[test]
    fn sample_commit_attributes_phases_and_prorated_io() {
        let c = WorkerCounters::default();
        let mut sample = PhaseSample::start();
        sample.decode_ns = 100;
        sample.app_ns = 200;
        sample.encode_ns = 50;
        sample.reply_len = 80;
        // A flush of 800 bytes taking 1000ns carries this 80-byte reply:
        // the packet's io share is a tenth of the flush.
        sample.commit(&c, 1000, 800);
        assert_eq!(c.decode_ns.load(R), 100);
        assert_eq!(c.app_ns.load(R), 200);
        assert_eq!(c.encode_ns.load(R), 50);
        assert_eq!(c.io_ns.load(R), 100);
        assert_eq!(c.sampled_packets.load(R), 1);
        assert!(c.window_ns.load(R) > 0);
    }

    #[test]
    fn alloc_stats_sync_pushes_only_deltas() {
        use crate::bufferpool::AllocStats;
        let c = WorkerCounters::default();
        let mut sync = AllocStatsSync::default();
        sync.push(AllocStats { allocations: 5, bytes_copied: 100, buffer_reuses: 2 }, &c);
        sync.push(AllocStats { allocations: 7, bytes_copied: 100, buffer_reuses: 4 }, &c);
        assert_eq!(c.allocations.load(R), 7);
        assert_eq!(c.bytes_copied.load(R), 100);
        assert_eq!(c.buffer_reuses.load(R), 4);
    }
}
