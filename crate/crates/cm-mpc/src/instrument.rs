//! Operation counters backing the no-solve-in-training and O(N)
//! cost-of-valuation checks.
//!
//! Counts are kept both globally (process-wide, for proving a region of
//! code never triggers an operation anywhere) and per thread (for exact
//! counts of single-threaded call paths regardless of concurrent tests).

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

static MODEL_STEPS: AtomicU64 = AtomicU64::new(0);
static MPC_SOLVES: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static MODEL_STEPS_LOCAL: Cell<u64> = const { Cell::new(0) };
    static MPC_SOLVES_LOCAL: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn count_model_step() {
    MODEL_STEPS.fetch_add(1, Ordering::Relaxed);
    MODEL_STEPS_LOCAL.with(|c| c.set(c.get() + 1));
}

#[inline]
pub(crate) fn count_mpc_solve() {
    MPC_SOLVES.fetch_add(1, Ordering::Relaxed);
    MPC_SOLVES_LOCAL.with(|c| c.set(c.get() + 1));
}

/// Process-wide `model::step` evaluations since start (or last reset).
pub fn model_step_count() -> u64 {
    MODEL_STEPS.load(Ordering::SeqCst)
}

/// Process-wide `mpc::solve` invocations since start (or last reset).
pub fn mpc_solve_count() -> u64 {
    MPC_SOLVES.load(Ordering::SeqCst)
}

/// `model::step` evaluations on the calling thread.
pub fn model_step_count_thread() -> u64 {
    MODEL_STEPS_LOCAL.with(|c| c.get())
}

/// `mpc::solve` invocations on the calling thread.
pub fn mpc_solve_count_thread() -> u64 {
    MPC_SOLVES_LOCAL.with(|c| c.get())
}

pub fn reset_counters() {
    MODEL_STEPS.store(0, Ordering::SeqCst);
    MPC_SOLVES.store(0, Ordering::SeqCst);
    MODEL_STEPS_LOCAL.with(|c| c.set(0));
    MPC_SOLVES_LOCAL.with(|c| c.set(0));
}
