//! Logical instrumentation counters.
//!
//! Counting is done at the op level (element accesses, multiply-accumulates,
//! bytes copied), not by profiling hardware. Each thread has its own set of
//! counters, so independent models on separate threads do not interfere.

use std::cell::RefCell;

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub element_reads: u64,
    pub element_writes: u64,
    /// Bytes of fresh buffers allocated to hold copies of existing data.
    pub copy_bytes_allocated: u64,
    /// Forward multiply-accumulates performed by weight products.
    pub multiply_ops: u64,
    /// Multiply-accumulates performed while back-propagating.
    pub backward_multiply_ops: u64,
    pub live_activation_bytes: u64,
    pub peak_activation_bytes: u64,
}

thread_local! {
    static COUNTERS: RefCell<Counters> = RefCell::new(Counters::default());
}

/// Current counter values for this thread.
pub fn snapshot() -> Counters {
    COUNTERS.with(|c| *c.borrow())
}

/// Zero the cumulative counters and restart the peak gauge at the current
/// live level.
pub fn reset() {
    COUNTERS.with(|c| {
        let mut c = c.borrow_mut();
        let live = c.live_activation_bytes;
        *c = Counters {
            live_activation_bytes: live,
            peak_activation_bytes: live,
            ..Counters::default()
        };
    });
}

fn update(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| f(&mut c.borrow_mut()));
}

pub(crate) fn record_reads(n: usize) {
    update(|c| c.element_reads += n as u64);
}

pub(crate) fn record_writes(n: usize) {
    update(|c| c.element_writes += n as u64);
}

pub(crate) fn record_copy(bytes: usize) {
    update(|c| c.copy_bytes_allocated += bytes as u64);
}

pub(crate) fn record_macs(n: usize) {
    update(|c| c.multiply_ops += n as u64);
}

pub(crate) fn record_backward_macs(n: usize) {
    update(|c| c.backward_multiply_ops += n as u64);
}

pub(crate) fn alloc_activation(bytes: usize) {
    update(|c| {
        c.live_activation_bytes += bytes as u64;
        c.peak_activation_bytes = c.peak_activation_bytes.max(c.live_activation_bytes);
    });
}

pub(crate) fn release_activation(bytes: usize) {
    update(|c| c.live_activation_bytes = c.live_activation_bytes.saturating_sub(bytes as u64));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_live_and_reset_keeps_live() {
        reset();
        let base = snapshot().live_activation_bytes;
        alloc_activation(100);
        alloc_activation(50);
        release_activation(120);
        let s = snapshot();
        assert_eq!(s.live_activation_bytes, base + 30);
        assert_eq!(s.peak_activation_bytes, base + 150);
        reset();
        let s = snapshot();
        assert_eq!(s.peak_activation_bytes, s.live_activation_bytes);
        release_activation(30);
    }
}
