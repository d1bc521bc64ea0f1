//! Worker fan-out with a process-wide serial override.
//!
//! Every parallel map here is an indexed map with per-item deterministic
//! inputs and order-preserving collection, so results are identical whether
//! run serial or parallel. `--serial` forces sequential execution anyway.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

static SERIAL: AtomicBool = AtomicBool::new(false);

pub fn set_serial(serial: bool) {
    SERIAL.store(serial, Ordering::SeqCst);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::SeqCst)
}

/// Map `f` over `items`, preserving order.
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if is_serial() {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}
