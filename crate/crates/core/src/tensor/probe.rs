//! Counts buffers allocated by graph ops on the current thread.
//!
//! Wrap a computation in [`measure`] to learn how many output elements the
//! ops inside it materialized and how large the single biggest buffer was.
//! Zero-copy ops (reshape, eval-mode dropout) do not count.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Sum of the lengths of every buffer created.
    pub total: usize,
    /// Length of the largest single buffer.
    pub largest: usize,
    pub buffers: usize,
}

thread_local! {
    static ACTIVE: Cell<usize> = const { Cell::new(0) };
    static STATS: Cell<AllocStats> = const { Cell::new(AllocStats { total: 0, largest: 0, buffers: 0 }) };
}

pub(crate) fn record(len: usize) {
    if ACTIVE.with(|a| a.get()) == 0 {
        return;
    }
    STATS.with(|s| {
        let mut st = s.get();
        st.total += len;
        st.largest = st.largest.max(len);
        st.buffers += 1;
        s.set(st);
    });
}

/// Runs `f` and reports the graph buffers it allocated. Nested calls report
/// only their own allocations.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let saved = STATS.with(|s| s.replace(AllocStats::default()));
    ACTIVE.with(|a| a.set(a.get() + 1));
    let out = f();
    ACTIVE.with(|a| a.set(a.get() - 1));
    let mine = STATS.with(|s| s.get());
    STATS.with(|s| {
        let merged = AllocStats {
            total: saved.total + mine.total,
            largest: saved.largest.max(mine.largest),
            buffers: saved.buffers + mine.buffers,
        };
        s.set(merged);
    });
    (out, mine)
}
