//! Multiply-accumulate meter.
//!
//! Only matrix products are counted (one MAC = one FLOP). Softmax, layer
//! norm, GELU and elementwise adds are deliberately left out; this is the
//! convention under which the published ViT GFLOPs figures are reproduced.
//! Backward-pass products are not counted either: the meter reports forward
//! cost, which is what the cost model compares against.
//!
//! The meter is thread-local so concurrent test threads do not interfere.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn record(macs: u64) {
    MACS.with(|m| m.set(m.get() + macs));
}

pub fn read() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

/// Runs `f` and returns its result with the MACs it recorded. The meter's
/// previous reading is restored afterwards (plus whatever `f` added).
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    let after = read();
    (out, after - before)
}
