//! Thread-local multiply-accumulate instrumentation.
//!
//! Counting convention: one multiply-accumulate = one counted unit; only
//! matrix and scan multiplies are counted, nonlinearities and additions are
//! not. Counts depend on operand shapes only, never on values.
//!
//! Two scopes are tracked:
//! * `total` — every MAC executed by the tensor kernels.
//! * `visible_linear` — matmul MACs recorded outside `interior` regions.
//!   Model code wraps the body of each fused sequence block in an interior
//!   region, so this scope reproduces what a module-level profiler sees when
//!   the block internals run as one opaque kernel: the patch embedding, skip
//!   fusions, conditioning MLP, and decoder.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static INTERIOR: Cell<u32> = const { Cell::new(0) };
    static TOTAL: Cell<u64> = const { Cell::new(0) };
    static VISIBLE: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacSnapshot {
    pub total: u64,
    pub visible_linear: u64,
}

pub fn reset_and_enable() {
    ENABLED.with(|c| c.set(true));
    INTERIOR.with(|c| c.set(0));
    TOTAL.with(|c| c.set(0));
    VISIBLE.with(|c| c.set(0));
}

pub fn disable() {
    ENABLED.with(|c| c.set(false));
}

pub fn snapshot() -> MacSnapshot {
    MacSnapshot {
        total: TOTAL.with(|c| c.get()),
        visible_linear: VISIBLE.with(|c| c.get()),
    }
}

#[inline]
pub fn record_matmul(macs: u64) {
    if ENABLED.with(|c| c.get()) {
        TOTAL.with(|c| c.set(c.get() + macs));
        if INTERIOR.with(|c| c.get()) == 0 {
            VISIBLE.with(|c| c.set(c.get() + macs));
        }
    }
}

#[inline]
pub fn record_scan_or_conv(macs: u64) {
    if ENABLED.with(|c| c.get()) {
        TOTAL.with(|c| c.set(c.get() + macs));
    }
}

/// RAII marker for a fused-kernel region; drops restore the previous depth.
pub struct InteriorGuard(());

pub fn enter_interior() -> InteriorGuard {
    INTERIOR.with(|c| c.set(c.get() + 1));
    InteriorGuard(())
}

impl Drop for InteriorGuard {
    fn drop(&mut self) {
        INTERIOR.with(|c| c.set(c.get().saturating_sub(1)));
    }
}
