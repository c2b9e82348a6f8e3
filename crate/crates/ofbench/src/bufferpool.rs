//! Packet-memory strategies: per-packet allocation versus pre-allocated,
//! reusable buffer pools.
//!
//! The two strategies exist side by side so their costs can be measured
//! against each other. `PerPacketObject` allocates fresh storage for every
//! message the way object-per-packet servers do; `PreallocatedPool` recycles
//! a fixed set of per-worker buffers so the steady-state allocation rate per
//! packet approaches zero.
//!
//! Ownership discipline is the load-bearing idea: an [`IoBuffer`] belongs to
//! exactly one processing context at a time and moves between threads only by
//! explicit hand-off. Resizing is therefore always done by the sole owner
//! ([`BufferPool::grow_exclusive`]) — there is no shared reference that could
//! observe stale storage mid-resize, and no lock to forget. Double release is
//! unrepresentable at the API level because [`BufferPool::release`] consumes
//! the buffer by value.

use serde::{Deserialize, Serialize};

/// Which packet-memory strategy a worker runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferStrategyKind {
    /// Fresh allocation per message; the legacy object-per-packet behavior.
    PerPacketObject,
    /// Recycled per-worker buffers; allocation only on pool exhaustion.
    PreallocatedPool,
}

/// Strategy plus pool geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStrategy {
    pub kind: BufferStrategyKind,
    /// Capacity of each pooled buffer in bytes.
    pub pool_buffer_size: usize,
    /// Buffers kept per worker pool.
    pub pool_depth: usize,
}

/// Smallest permitted pooled buffer: the largest benchmark message plus
/// header slack.
pub const MIN_POOL_BUFFER_SIZE: usize = 128;

/// Smallest permitted pool depth.
pub const MIN_POOL_DEPTH: usize = 2;

impl BufferStrategy {
    pub fn pooled(pool_buffer_size: usize, pool_depth: usize) -> BufferStrategy {
        BufferStrategy { kind: BufferStrategyKind::PreallocatedPool, pool_buffer_size, pool_depth }
    }

    pub fn per_packet() -> BufferStrategy {
        // Geometry fields are irrelevant in object mode but kept valid so a
        // strategy value can always be validated uniformly.
        BufferStrategy {
            kind: BufferStrategyKind::PerPacketObject,
            pool_buffer_size: 4096,
            pool_depth: 64,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pool_buffer_size < MIN_POOL_BUFFER_SIZE {
            return Err(format!(
                "pool_buffer_size {} below minimum {MIN_POOL_BUFFER_SIZE}",
                self.pool_buffer_size
            ));
        }
        if self.pool_depth < MIN_POOL_DEPTH {
            return Err(format!("pool_depth {} below minimum {MIN_POOL_DEPTH}", self.pool_depth));
        }
        Ok(())
    }
}

impl Default for BufferStrategy {
    /// One page per buffer, deep enough to cover batching.
    fn default() -> BufferStrategy {
        BufferStrategy::pooled(4096, 64)
    }
}

/// Allocation and copy counters for one pool (that is, one worker).
/// Monotonically non-decreasing within a run; merged by summation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    /// Heap allocations attributable to packet processing: pool refills,
    /// per-packet objects, buffer growth.
    pub allocations: u64,
    /// Bytes moved by buffer growth, compaction, and object-mode copies.
    pub bytes_copied: u64,
    /// Acquisitions served by recycling instead of allocating.
    pub buffer_reuses: u64,
}

impl std::ops::AddAssign for AllocStats {
    fn add_assign(&mut self, rhs: AllocStats) {
        self.allocations += rhs.allocations;
        self.bytes_copied += rhs.bytes_copied;
        self.buffer_reuses += rhs.buffer_reuses;
    }
}

/// A byte buffer with read/write cursors, owned by exactly one
/// connection-processing context at a time.
///
/// `0 <= read_cursor <= write_cursor <= capacity` always holds; `readable()`
/// is the span between the cursors and `writable()` the free tail.
#[derive(Debug)]
pub struct IoBuffer {
    data: Box<[u8]>,
    read_cursor: usize,
    write_cursor: usize,
    generation: u64,
}

impl IoBuffer {
    fn with_capacity(capacity: usize) -> IoBuffer {
        IoBuffer { data: vec![0u8; capacity].into_boxed_slice(), read_cursor: 0, write_cursor: 0, generation: 0 }
    }

    /// Zero-capacity placeholder, for temporarily taking a real buffer out of
    /// a struct field (e.g. to pass it to [`BufferPool::grow_exclusive`] by
    /// value). Never handed out by a pool and useless for IO.
    pub fn empty() -> IoBuffer {
        IoBuffer { data: Box::new([]), read_cursor: 0, write_cursor: 0, generation: u64::MAX }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    /// Reuse-audit counter; bumped every time the buffer passes through
    /// [`BufferPool::release`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn read_cursor(&self) -> usize {
        self.read_cursor
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    /// Bytes written but not yet consumed.
    pub fn readable(&self) -> &[u8] {
        &self.data[self.read_cursor..self.write_cursor]
    }

    /// Free space after the written region.
    pub fn writable(&mut self) -> &mut [u8] {
        &mut self.data[self.write_cursor..]
    }

    pub fn advance_read(&mut self, n: usize) {
        self.read_cursor += n;
        debug_assert!(self.read_cursor <= self.write_cursor);
    }

    pub fn advance_write(&mut self, n: usize) {
        self.write_cursor += n;
        debug_assert!(self.write_cursor <= self.data.len());
    }

    pub fn is_empty(&self) -> bool {
        self.read_cursor == self.write_cursor
    }

    /// Drops consumed bytes and moves the unconsumed tail to the front,
    /// opening up write space. The move is a real copy and is charged to
    /// `stats.bytes_copied`.
    pub fn compact(&mut self, stats: &mut AllocStats) {
        if self.read_cursor == 0 {
            return;
        }
        let len = self.write_cursor - self.read_cursor;
        if len > 0 {
            self.data.copy_within(self.read_cursor..self.write_cursor, 0);
            stats.bytes_copied += len as u64;
        }
        self.read_cursor = 0;
        self.write_cursor = len;
    }

    /// Resets both cursors; contents become dead.
    pub fn clear(&mut self) {
        self.read_cursor = 0;
        self.write_cursor = 0;
    }
}

/// A worker-confined buffer source implementing both strategies.
///
/// Pools are never shared: each worker owns one, and buffers travel between
/// threads only by moving the `IoBuffer` value itself. A buffer released into
/// a different worker's pool than it came from simply joins that pool (or is
/// discarded if the pool is full), which keeps every pool's footprint bounded
/// by its configured depth no matter how ownership migrates.
#[derive(Debug)]
pub struct BufferPool {
    strategy: BufferStrategy,
    free: Vec<IoBuffer>,
    stats: AllocStats,
    next_generation: u64,
}

impl BufferPool {
    pub fn new(strategy: BufferStrategy) -> BufferPool {
        let mut pool =
            BufferPool { strategy, free: Vec::new(), stats: AllocStats::default(), next_generation: 1 };
        if strategy.kind == BufferStrategyKind::PreallocatedPool {
            pool.free.reserve_exact(strategy.pool_depth);
            for _ in 0..strategy.pool_depth {
                pool.stats.allocations += 1;
                pool.free.push(IoBuffer::with_capacity(strategy.pool_buffer_size));
            }
        }
        pool
    }

    pub fn strategy(&self) -> BufferStrategy {
        self.strategy
    }

    /// Buffers currently idle in the pool.
    pub fn idle(&self) -> usize {
        self.free.len()
    }

    pub fn stats(&self) -> AllocStats {
        self.stats
    }

    /// Charges allocations that happen outside the pool (owned message
    /// objects in per-packet mode) to this worker's stats.
    pub fn record_external_alloc(&mut self, count: u64) {
        self.stats.allocations += count;
    }

    /// Charges an out-of-pool copy (object-mode serialize-then-copy).
    pub fn record_external_copy(&mut self, bytes: u64) {
        self.stats.bytes_copied += bytes;
    }

    /// Hands out a buffer with at least `min_capacity` bytes of space.
    ///
    /// Pool mode recycles when possible and allocates only on exhaustion
    /// (growth is permitted but counted). Object mode allocates every time —
    /// that is the behavior being measured.
    pub fn acquire(&mut self, min_capacity: usize) -> IoBuffer {
        match self.strategy.kind {
            BufferStrategyKind::PerPacketObject => {
                self.stats.allocations += 1;
                IoBuffer::with_capacity(min_capacity.max(self.strategy.pool_buffer_size))
            }
            BufferStrategyKind::PreallocatedPool => {
                // LIFO reuse: the most recently released buffer is the
                // cache-warmest. Undersized idle buffers (possible after a
                // grow elsewhere) are skipped for callers they cannot serve.
                if let Some(pos) = self.free.iter().rposition(|b| b.capacity() >= min_capacity) {
                    self.stats.buffer_reuses += 1;
                    return self.free.remove(pos);
                }
                self.stats.allocations += 1;
                IoBuffer::with_capacity(min_capacity.max(self.strategy.pool_buffer_size))
            }
        }
    }

    /// Compacts `buffer` in place, charging the byte move to this pool's
    /// stats (for buffers currently out on loan, which carry no stats handle
    /// of their own).
    pub fn compact(&mut self, buffer: &mut IoBuffer) {
        buffer.compact(&mut self.stats);
    }

    /// Returns a buffer to the pool (object mode: drops it). Cursors reset
    /// and the generation increments so reuse is auditable.
    ///
    /// Taking the buffer by value is what makes a double release a compile
    /// error rather than a runtime hazard.
    pub fn release(&mut self, mut buffer: IoBuffer) {
        buffer.clear();
        buffer.generation = self.next_generation;
        self.next_generation += 1;
        if self.strategy.kind == BufferStrategyKind::PreallocatedPool
            && self.free.len() < self.strategy.pool_depth
        {
            self.free.push(buffer);
        }
        // Otherwise the buffer drops: object mode never pools, and a pool
        // already at depth discards the excess to bound cross-thread drift.
    }

    /// Replaces `buffer` with one of `new_capacity`, preserving contents up
    /// to the write cursor. Safe precisely because the caller is the sole
    /// owner: the old storage dies here and no other context can observe it.
    pub fn grow_exclusive(&mut self, buffer: IoBuffer, new_capacity: usize) -> IoBuffer {
        debug_assert!(new_capacity >= buffer.write_cursor);
        let mut grown = IoBuffer::with_capacity(new_capacity);
        self.stats.allocations += 1;
        grown.data[..buffer.write_cursor].copy_from_slice(&buffer.data[..buffer.write_cursor]);
        self.stats.bytes_copied += buffer.write_cursor as u64;
        grown.read_cursor = buffer.read_cursor;
        grown.write_cursor = buffer.write_cursor;
        grown.generation = buffer.generation;
        grown
    }
}
