use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

/// Auxiliary storage and work counters of one kernel invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemReport {
    /// Peak number of scratch floats alive at once, beyond inputs and outputs.
    pub aux_floats: usize,
    /// Whether a logit or weight buffer held all `n_q·n_k` entries at once.
    /// True only when a single tile covers the whole problem.
    pub n_sq_materialized: bool,
    /// Largest single scratch allocation.
    pub largest_alloc: usize,
    /// `(i, j)` tile pairs whose logits were evaluated.
    pub blocks_computed: u64,
    /// Tile pairs skipped because every entry is causally masked.
    pub blocks_skipped: u64,
    /// Logit entries evaluated (including masked entries of partial tiles).
    pub logits_evaluated: u64,
    /// Read-modify-write updates applied to `dQ` tiles.
    pub dq_updates: u64,
}

/// Counts scratch allocations made through it. Safe to share across worker
/// threads; the peak reflects buffers that were alive concurrently.
#[derive(Debug, Default)]
pub struct AuxTracker {
    current: AtomicUsize,
    peak: AtomicUsize,
    largest: AtomicUsize,
    blocks_computed: AtomicU64,
    blocks_skipped: AtomicU64,
    logits: AtomicU64,
    dq_updates: AtomicU64,
    largest_logits: AtomicUsize,
}

impl AuxTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scratch for logits or weights of one tile.
    pub fn alloc_logits(&self, len: usize) -> Scratch<'_> {
        self.largest_logits.fetch_max(len, Ordering::SeqCst);
        self.alloc(len)
    }

    pub fn alloc(&self, len: usize) -> Scratch<'_> {
        let now = self.current.fetch_add(len, Ordering::SeqCst) + len;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.largest.fetch_max(len, Ordering::SeqCst);
        Scratch {
            buf: vec![0.0; len],
            tracker: self,
        }
    }

    pub(crate) fn block_computed(&self, logits: usize) {
        self.blocks_computed.fetch_add(1, Ordering::Relaxed);
        self.logits.fetch_add(logits as u64, Ordering::Relaxed);
    }

    pub(crate) fn block_skipped(&self) {
        self.blocks_skipped.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn dq_update(&self) {
        self.dq_updates.fetch_add(1, Ordering::Relaxed);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Summary for a problem of `n_q × n_k` logits.
    pub fn report(&self, n_q: usize, n_k: usize) -> MemReport {
        let largest = self.largest.load(Ordering::SeqCst);
        MemReport {
            aux_floats: self.peak(),
            n_sq_materialized: self.largest_logits.load(Ordering::SeqCst) >= n_q * n_k,
            largest_alloc: largest,
            blocks_computed: self.blocks_computed.load(Ordering::Relaxed),
            blocks_skipped: self.blocks_skipped.load(Ordering::Relaxed),
            logits_evaluated: self.logits.load(Ordering::Relaxed),
            dq_updates: self.dq_updates.load(Ordering::Relaxed),
        }
    }
}

/// Zero-initialized buffer whose size is released from the tracker on drop.
pub struct Scratch<'a> {
    buf: Vec<f64>,
    tracker: &'a AuxTracker,
}

impl Scratch<'_> {
    pub fn fill_zero(&mut self) {
        self.buf.iter_mut().for_each(|x| *x = 0.0);
    }
}

impl Deref for Scratch<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf
    }
}

impl DerefMut for Scratch<'_> {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }
}

impl Drop for Scratch<'_> {
    fn drop(&mut self) {
        self.tracker.current.fetch_sub(self.buf.len(), Ordering::SeqCst);
    }
}
