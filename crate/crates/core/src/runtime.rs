//! Process-level tuning for long training runs.

/// Keeps large buffers on the heap instead of fresh `mmap` regions.
///
/// Training allocates and frees multi-megabyte activation matrices every
/// update; with glibc defaults each of those is a new mapping whose pages are
/// faulted in again. Call once at startup; a no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds and is called before
    // any concurrent allocation work starts.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
