//! Logical allocation accounting for tensor buffers.
//!
//! Every `Tensor` registers its payload bytes on construction and
//! deregisters on drop, so a benchmark can ask "how many tensor bytes
//! were live at the worst moment of this run" without touching OS RSS.
//! Counters are thread-local; benchmarks run single-threaded.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Tensor bytes live on this thread right now.
pub fn current_bytes() -> usize {
    CURRENT.with(|c| c.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Restart peak tracking from the current live total.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}
