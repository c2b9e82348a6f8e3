//! Optional CPU pinning for engine threads.
//!
//! Pinning is round-robin: worker *i* goes to core `i mod available`. When
//! there are more workers than cores the assignment wraps, so oversubscribed
//! workers share cores deterministically instead of migrating. Failure to pin
//! (restricted cpuset, exotic container config) degrades to a warning — the
//! engine runs unpinned rather than refusing to start.

use std::num::NonZeroUsize;

/// Core index for a worker under round-robin assignment.
pub fn core_for(worker_index: usize, available_cores: usize) -> usize {
    debug_assert!(available_cores > 0);
    worker_index % available_cores
}

/// Number of cores this process may schedule on.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
}

/// Pins the calling thread to `core_for(worker_index, available_cores())`.
/// Returns the chosen core on success.
pub fn pin_worker(worker_index: usize) -> Option<usize> {
    let core = core_for(worker_index, available_cores());
    // SAFETY: cpu_set_t is a plain bitmask struct; zeroed is a valid empty
    // set, and CPU_SET only writes within its bounds because core <
    // available_cores() <= CPU_SETSIZE on any system we can run on.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        let rc = libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
        if rc != 0 {
            log::warn!(
                "failed to pin worker {worker_index} to core {core}: {}; continuing unpinned",
                std::io::Error::last_os_error()
            );
            return None;
        }
    }
    Some(core)
}
