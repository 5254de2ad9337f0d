//! Deterministic virtual clock with microsecond resolution.
//!
//! All simulation time is integer microseconds so that configured periods
//! (control dt, inference latency, link latency) land on exact instants and
//! timeline arithmetic never accumulates float error.

use std::cell::Cell;
use std::rc::Rc;

/// Microseconds per second.
pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Convert seconds to whole microseconds, rounding to nearest.
pub fn secs_to_micros(secs: f64) -> u64 {
    (secs * MICROS_PER_SEC as f64).round() as u64
}

/// Convert microseconds to seconds.
pub fn micros_to_secs(micros: u64) -> f64 {
    micros as f64 / MICROS_PER_SEC as f64
}

/// Shared handle to a monotone virtual clock. Clones observe the same time.
#[derive(Clone, Default)]
pub struct VirtualClock {
    micros: Rc<Cell<u64>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_micros(&self) -> u64 {
        self.micros.get()
    }

    pub fn now_secs(&self) -> f64 {
        micros_to_secs(self.micros.get())
    }

    pub fn advance(&self, micros: u64) {
        self.micros.set(self.micros.get() + micros);
    }

    /// Advance to an absolute instant. Time never runs backwards.
    pub fn advance_to(&self, micros: u64) {
        if micros > self.micros.get() {
            self.micros.set(micros);
        }
    }
}
