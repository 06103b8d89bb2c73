//! Counter for operations that touch full-order (n-sized) objects.
//!
//! The algebraic online stage must be independent of the full-order
//! dimension. Every operation that allocates or traverses an n-sized object
//! bumps this counter, so callers can assert that a code region performed no
//! full-order work at all.
//!
//! The counter is thread-local: wrap the region of interest on one thread
//! (inside a parallel worker, wrap the per-item call).

use std::cell::Cell;

thread_local! {
    static LARGE_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of full-order-matrix operations performed so far on this thread.
pub fn large_ops() -> u64 {
    LARGE_OPS.with(|c| c.get())
}

pub(crate) fn bump() {
    LARGE_OPS.with(|c| c.set(c.get() + 1));
}

/// Runs `f` and returns its result together with the number of full-order
/// operations it performed on the current thread.
pub fn counting<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = large_ops();
    let out = f();
    (out, large_ops() - before)
}
