//! Opt-in tracking of how close a forward pass comes to a non-smooth point
//! (a clip edge, a rounding boundary, an activation kink). Gradient checks
//! use it to reject evaluation points where finite differences are invalid.

use std::cell::Cell;

thread_local! {
    static MARGIN: Cell<Option<f64>> = const { Cell::new(None) };
}

/// Records that some non-smooth site was evaluated at distance `d` from
/// its kink. No-op unless a [`track`] scope is active on this thread.
#[inline]
pub(crate) fn observe(d: f64) {
    MARGIN.with(|m| {
        if let Some(cur) = m.get() {
            m.set(Some(cur.min(d.abs())));
        }
    });
}

/// Runs `f`, returning its result and the smallest kink distance observed.
pub fn track<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let prev = MARGIN.with(|m| m.replace(Some(f64::INFINITY)));
    let out = f();
    let margin = MARGIN.with(|m| m.replace(prev)).unwrap_or(f64::INFINITY);
    if let Some(p) = prev {
        MARGIN.with(|m| m.set(Some(p.min(margin))));
    }
    (out, margin)
}
