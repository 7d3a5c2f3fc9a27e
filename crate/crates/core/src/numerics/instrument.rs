//! Scratch-memory and work accounting.
//!
//! Every tensor buffer registers its byte size with a thread-local ledger
//! when it is allocated and releases it when dropped. [`measure`] reports
//! the high-water mark of live tensor bytes above the level at entry, which
//! is the transient ("scratch") memory a computation needed. Tensors that
//! already existed when the scope opened (model weights, raw inputs) are
//! part of the baseline and do not count.
//!
//! Kernels also bump a multiply-add counter so callers can compare the
//! amount of arithmetic two computations performed.
//!
//! Counters are per thread. Buffers dropped on a thread other than the one
//! that allocated them skew both threads' live counts, so measurements
//! should run single-threaded.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Adds `n` multiply-add (or equivalent scalar) operations to the counter.
#[inline]
pub fn add_ops(n: u64) {
    OPS.with(|ops| ops.set(ops.get().wrapping_add(n)));
}

/// Total operations counted on this thread so far.
pub fn ops_count() -> u64 {
    OPS.with(Cell::get)
}

/// Bytes of tensor data currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Result of a [`measure`] scope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Measurement {
    /// High-water mark of tensor bytes allocated inside the scope.
    pub peak_scratch_bytes: usize,
    /// Operations counted inside the scope.
    pub ops: u64,
}

/// Runs `f` and reports its peak scratch bytes and operation count.
///
/// Scopes nest: the enclosing scope still sees the inner peak.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Measurement) {
    let base = live_bytes();
    let outer_peak = PEAK.with(|p| p.replace(base));
    let ops0 = ops_count();
    let out = f();
    let inner_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(outer_peak.max(inner_peak)));
    let m = Measurement {
        peak_scratch_bytes: inner_peak.saturating_sub(base),
        ops: ops_count().wrapping_sub(ops0),
    };
    (out, m)
}
