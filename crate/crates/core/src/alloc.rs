//! Allocator tuning.
//!
//! Every op allocates its output, often several megabytes. glibc serves
//! such blocks with fresh `mmap`s and returns them on free, so each op pays
//! the page faults again. Raising the mmap and trim thresholds keeps them on
//! the heap, where freed blocks are reused.

use std::sync::Once;

static TUNE: Once = Once::new();

pub fn retain_large_allocations() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
