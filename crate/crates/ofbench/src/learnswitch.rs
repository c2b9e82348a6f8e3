//! The learning-switch application: maps (datapath, MAC) to the port it was
//! learned on, under two concurrency strategies.
//!
//! * [`SharedTable`] — one table shared by every worker, striped into
//!   independently locked segments. Every lookup/insert takes exactly one
//!   stripe lock, and each acquisition is counted so contention is visible
//!   in the run counters instead of being a matter of opinion.
//! * [`Shard`] — a per-worker slice of the keyspace with no synchronization
//!   at all. Switches are the partition unit: datapath `d` lives in shard
//!   `d mod shard_count`, so one switch's state never spans workers and the
//!   hot path executes zero atomic or locked operations.
//!
//! Both strategies run the identical decision algorithm
//! ([`handle_packet_in`]), so for any single-threaded packet stream they
//! produce the same `Decision` sequence and the same final table.
//!
//! The maps are open-addressing hash tables (hashbrown under `std`'s
//! `HashMap`) keyed by a fast non-cryptographic hasher — no chained buckets,
//! no per-entry box.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rustc_hash::{FxBuildHasher, FxHashMap};
use serde::{Deserialize, Serialize};
use std::hash::{BuildHasher, Hash, Hasher};

/// Key of one learned binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MacKey {
    pub datapath_id: u64,
    /// 48-bit MAC in integer form.
    pub mac: u64,
}

/// The learning switch's verdict for one packet-in: forward out a learned
/// port, or flood because the destination is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Forward(u16),
    Flood,
}

/// Which table layout the engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableStrategyKind {
    SharedLocked,
    ShardedPerWorker,
}

/// Stripe count used when none is configured. Plenty of stripes relative to
/// any sane worker count keeps false lock sharing low.
pub const DEFAULT_STRIPE_COUNT: usize = 64;

struct Stripe {
    map: Mutex<FxHashMap<MacKey, u16>>,
    lock_acquisitions: AtomicU64,
}

/// Concurrently shared MAC table, striped-locked. Safe to call from any
/// thread; upserts are linearizable per key because a key always lives in
/// exactly one stripe and stripe access is mutually exclusive.
pub struct SharedTable {
    stripes: Box<[Stripe]>,
    mask: usize,
}

impl SharedTable {
    pub fn new(stripe_count: usize) -> SharedTable {
        let count = stripe_count.next_power_of_two().max(1);
        let stripes = (0..count)
            .map(|_| Stripe {
                map: Mutex::new(FxHashMap::default()),
                lock_acquisitions: AtomicU64::new(0),
            })
            .collect::<Vec<_>>()
            .into_boxed_slice();
        SharedTable { stripes, mask: count - 1 }
    }

    fn stripe(&self, key: &MacKey) -> &Stripe {
        &self.stripes[(FxBuildHasher.hash_one(key) as usize) & self.mask]
    }

    pub fn lookup(&self, key: &MacKey) -> Option<u16> {
        let stripe = self.stripe(key);
        let guard = stripe.map.lock();
        stripe.lock_acquisitions.fetch_add(1, Ordering::Relaxed);
        guard.get(key).copied()
    }

    pub fn insert(&self, key: MacKey, port: u16) {
        let stripe = self.stripe(&key);
        let mut guard = stripe.map.lock();
        stripe.lock_acquisitions.fetch_add(1, Ordering::Relaxed);
        guard.insert(key, port);
    }

    /// Total entries across stripes. Takes each stripe lock briefly, so the
    /// value is a consistent sum only once writers have quiesced.
    pub fn len(&self) -> usize {
        self.stripes.iter().map(|s| s.map.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lock acquisitions performed by `lookup`/`insert` so far (the `len`
    /// accounting pass above is excluded on purpose: it is not packet work).
    pub fn lock_acquisitions(&self) -> u64 {
        self.stripes.iter().map(|s| s.lock_acquisitions.load(Ordering::Relaxed)).sum()
    }
}

/// One worker's private slice of the keyspace. No locks, no atomics: the
/// owning worker is the only context that ever touches it, and handing a
/// shard to two workers is a contract violation caught by the owner check.
#[derive(Debug)]
pub struct Shard {
    map: FxHashMap<MacKey, u16>,
    shard_index: usize,
    shard_count: usize,
}

/// Which shard owns a datapath.
pub fn shard_owner(datapath_id: u64, shard_count: usize) -> usize {
    (datapath_id % shard_count as u64) as usize
}

impl Shard {
    pub fn new(shard_index: usize, shard_count: usize) -> Shard {
        assert!(shard_index < shard_count);
        Shard { map: FxHashMap::default(), shard_index, shard_count }
    }

    #[inline]
    fn assert_owned(&self, key: &MacKey) {
        debug_assert_eq!(
            shard_owner(key.datapath_id, self.shard_count),
            self.shard_index,
            "datapath {} does not belong to shard {}/{}",
            key.datapath_id,
            self.shard_index,
            self.shard_count
        );
    }

    pub fn lookup(&self, key: &MacKey) -> Option<u16> {
        self.assert_owned(key);
        self.map.get(key).copied()
    }

    pub fn insert(&mut self, key: MacKey, port: u16) {
        self.assert_owned(&key);
        self.map.insert(key, port);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn shard_index(&self) -> usize {
        self.shard_index
    }
}

/// The complete sharded table, used directly in single-threaded contexts and
/// split via [`ShardedTable::into_shards`] when each worker takes ownership
/// of its slice.
#[derive(Debug)]
pub struct ShardedTable {
    shards: Vec<Shard>,
}

impl ShardedTable {
    pub fn new(shard_count: usize) -> ShardedTable {
        assert!(shard_count >= 1);
        ShardedTable { shards: (0..shard_count).map(|i| Shard::new(i, shard_count)).collect() }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_for(&mut self, datapath_id: u64) -> &mut Shard {
        let idx = shard_owner(datapath_id, self.shards.len());
        &mut self.shards[idx]
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(Shard::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.iter().all(Shard::is_empty)
    }

    /// Splits the table into its shards so each worker can own one outright.
    pub fn into_shards(self) -> Vec<Shard> {
        self.shards
    }
}

/// A worker's handle onto whichever table strategy is configured: either a
/// reference to the shared table or exclusive access to its own shard.
pub enum TableView<'a> {
    Shared(&'a SharedTable),
    Shard(&'a mut Shard),
}

impl TableView<'_> {
    pub fn lookup(&self, key: &MacKey) -> Option<u16> {
        match self {
            TableView::Shared(t) => t.lookup(key),
            TableView::Shard(s) => s.lookup(key),
        }
    }

    pub fn insert(&mut self, key: MacKey, port: u16) {
        match self {
            TableView::Shared(t) => t.insert(key, port),
            TableView::Shard(s) => s.insert(key, port),
        }
    }
}

/// The learning-switch decision procedure, identical for both strategies.
///
/// The destination is looked up *before* the source is learned, so Forward
/// means "the destination was known prior to this packet". The source
/// binding is always upserted. Exactly one `Decision` comes back per call —
/// the caller answers each packet-in with exactly one message.
pub fn handle_packet_in(
    table: &mut TableView<'_>,
    datapath_id: u64,
    in_port: u16,
    src_mac: u64,
    dst_mac: u64,
) -> Decision {
    let known = table.lookup(&MacKey { datapath_id, mac: dst_mac });
    table.insert(MacKey { datapath_id, mac: src_mac }, in_port);
    match known {
        Some(port) => Decision::Forward(port),
        None => Decision::Flood,
    }
}
