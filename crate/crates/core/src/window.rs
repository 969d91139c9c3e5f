//! Residency state machine of the sliding weight window.
//!
//! The block sequence is consumed cyclically, one forward step after
//! another, so positions are global counters (`k`-th use of the sequence,
//! block `seq[k % len]`). A block is *admitted* when the window has room; its
//! bytes are reserved at admission and returned at release. Retained blocks
//! are admitted on first encounter, never count against the window and are
//! never unloaded. The loading agent loads admitted blocks strictly in order.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use thiserror::Error;

use crate::partition::BlockId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    #[error("expected block {expected} next, got {got}")]
    OutOfOrder { expected: BlockId, got: BlockId },
    #[error("release of {0} without acquire")]
    NotAcquired(BlockId),
    #[error("load completion for {0} that was not in flight")]
    NotInFlight(BlockId),
    #[error("a load is already in flight")]
    Busy,
    #[error("window must hold at least one block")]
    ZeroWindow,
    #[error("empty block sequence")]
    EmptySequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    global: u64,
    loaded: bool,
}

#[derive(Debug, Clone)]
pub struct WindowState {
    seq: Vec<(BlockId, u64)>,
    retained: Vec<bool>,
    window: usize,
    /// Admitted, not yet released, non-retained blocks in order.
    active: VecDeque<Slot>,
    /// Seq indices of retained blocks: admitted, loaded.
    retained_admitted: Vec<bool>,
    retained_loaded: Vec<bool>,
    /// Admission order of everything awaiting a load.
    load_queue: VecDeque<u64>,
    in_flight: Option<u64>,
    next_admit: u64,
    next_use: u64,
    acquired: Option<u64>,
    resident_bytes: u64,
    peak_bytes: u64,
    loads: u64,
}

impl WindowState {
    /// `seq` is one forward step's block order with byte sizes; `retain`
    /// marks blocks to keep resident.
    pub fn new(
        seq: Vec<(BlockId, u64)>,
        window: usize,
        retain: impl Fn(BlockId) -> bool,
    ) -> Result<Self, WindowError> {
        if window == 0 {
            return Err(WindowError::ZeroWindow);
        }
        if seq.is_empty() {
            return Err(WindowError::EmptySequence);
        }
        let retained: Vec<bool> = seq.iter().map(|(id, _)| retain(*id)).collect();
        let n = seq.len();
        // More slots than cycling blocks would admit a block's next use
        // while the current one is still resident.
        let cycling = retained.iter().filter(|&&r| !r).count();
        let mut s = Self {
            seq,
            retained,
            window: window.min(cycling.max(1)),
            active: VecDeque::new(),
            retained_admitted: alloc::vec![false; n],
            retained_loaded: alloc::vec![false; n],
            load_queue: VecDeque::new(),
            in_flight: None,
            next_admit: 0,
            next_use: 0,
            acquired: None,
            resident_bytes: 0,
            peak_bytes: 0,
            loads: 0,
        };
        s.admit();
        Ok(s)
    }

    fn idx(&self, global: u64) -> usize {
        (global % self.seq.len() as u64) as usize
    }

    pub fn block_at(&self, global: u64) -> BlockId {
        self.seq[self.idx(global)].0
    }

    fn admit(&mut self) {
        // Stop if every non-retained block is retained-only (nothing to cycle).
        if self.retained.iter().all(|&r| r) {
            for i in 0..self.seq.len() {
                if !self.retained_admitted[i] {
                    self.retained_admitted[i] = true;
                    self.charge(self.seq[i].1);
                    self.load_queue.push_back(i as u64);
                }
            }
            return;
        }
        while self.active.len() < self.window {
            let g = self.next_admit;
            let i = self.idx(g);
            self.next_admit += 1;
            if self.retained[i] {
                if !self.retained_admitted[i] {
                    self.retained_admitted[i] = true;
                    self.charge(self.seq[i].1);
                    self.load_queue.push_back(g);
                }
                continue;
            }
            self.active.push_back(Slot {
                global: g,
                loaded: false,
            });
            self.charge(self.seq[i].1);
            self.load_queue.push_back(g);
        }
    }

    fn charge(&mut self, bytes: u64) {
        self.resident_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.resident_bytes);
    }

    /// Loading agent: take the next admitted block to load.
    pub fn start_next_load(&mut self) -> Result<Option<(u64, BlockId)>, WindowError> {
        if self.in_flight.is_some() {
            return Err(WindowError::Busy);
        }
        let Some(g) = self.load_queue.pop_front() else {
            return Ok(None);
        };
        self.in_flight = Some(g);
        Ok(Some((g, self.block_at(g))))
    }

    pub fn finish_load(&mut self, global: u64) -> Result<(), WindowError> {
        if self.in_flight != Some(global) {
            return Err(WindowError::NotInFlight(self.block_at(global)));
        }
        self.in_flight = None;
        self.loads += 1;
        let i = self.idx(global);
        if self.retained[i] {
            self.retained_loaded[i] = true;
        } else if let Some(s) = self.active.iter_mut().find(|s| s.global == global) {
            s.loaded = true;
        }
        Ok(())
    }

    /// Global position of the next block the decode loop will use.
    pub fn next_use(&self) -> u64 {
        self.next_use
    }

    pub fn expected_next(&self) -> BlockId {
        self.block_at(self.next_use)
    }

    /// Whether the block at `global` is resident.
    pub fn is_loaded(&self, global: u64) -> bool {
        let i = self.idx(global);
        if self.retained[i] {
            return self.retained_loaded[i];
        }
        self.active.iter().any(|s| s.global == global && s.loaded)
    }

    /// Decode loop: claim the next block. Returns its global position; the
    /// caller must wait until [`Self::is_loaded`] before computing.
    pub fn acquire(&mut self, id: BlockId) -> Result<u64, WindowError> {
        let expected = self.expected_next();
        if id != expected || self.acquired.is_some() {
            return Err(WindowError::OutOfOrder { expected, got: id });
        }
        self.acquired = Some(self.next_use);
        Ok(self.next_use)
    }

    /// Decode loop: done with `id`. Unloads it unless retained and admits
    /// the next block into the window.
    pub fn release(&mut self, id: BlockId) -> Result<(), WindowError> {
        let Some(g) = self.acquired else {
            return Err(WindowError::NotAcquired(id));
        };
        if self.block_at(g) != id {
            return Err(WindowError::NotAcquired(id));
        }
        let i = self.idx(g);
        if !self.retained[i] {
            let front = self.active.pop_front().expect("acquired block is active");
            debug_assert_eq!(front.global, g);
            self.resident_bytes -= self.seq[i].1;
        }
        self.acquired = None;
        self.next_use += 1;
        self.admit();
        Ok(())
    }

    /// Non-retained blocks currently admitted.
    pub fn window_occupancy(&self) -> usize {
        self.active.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn loaded_count(&self) -> usize {
        self.active.iter().filter(|s| s.loaded).count()
            + self.retained_loaded.iter().filter(|&&l| l).count()
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn loads_completed(&self) -> u64 {
        self.loads
    }

    pub fn in_flight(&self) -> Option<u64> {
        self.in_flight
    }

    pub fn is_retained(&self, id: BlockId) -> bool {
        self.seq
            .iter()
            .zip(&self.retained)
            .any(|((b, _), &r)| *b == id && r)
    }

    /// Σ sizes over admitted blocks, recomputed from scratch.
    pub fn recount_bytes(&self) -> u64 {
        let active: u64 = self
            .active
            .iter()
            .map(|s| self.seq[self.idx(s.global)].1)
            .sum();
        let retained: u64 = (0..self.seq.len())
            .filter(|&i| self.retained_admitted[i])
            .map(|i| self.seq[i].1)
            .sum();
        active + retained
    }
}

/// Largest byte total of any `w` cyclically consecutive blocks: the peak of
/// a run without retention.
pub fn max_cyclic_window(sizes: &[u64], w: usize) -> u64 {
    let n = sizes.len();
    if n == 0 {
        return 0;
    }
    let w = w.min(n);
    (0..n)
        .map(|start| (0..w).map(|k| sizes[(start + k) % n]).sum())
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(layers: usize, master: bool) -> Vec<(BlockId, u64)> {
        let mut s = Vec::new();
        if master {
            s.push((BlockId::PRE, 1000));
        }
        for l in 0..layers {
            s.push((BlockId::attn(l), 10));
            s.push((BlockId::ffn(l), 30));
        }
        if master {
            s.push((BlockId::POST, 1001));
        }
        s
    }

    fn drive(st: &mut WindowState, id: BlockId) {
        let g = st.acquire(id).unwrap();
        while !st.is_loaded(g) {
            let (lg, _) = st.start_next_load().unwrap().unwrap();
            st.finish_load(lg).unwrap();
        }
        st.release(id).unwrap();
    }

    #[test]
    fn window_one_has_no_lookahead() {
        let s = seq(2, false);
        let mut st = WindowState::new(s.clone(), 1, |_| false).unwrap();
        for (id, _) in s.iter().cycle().take(8) {
            assert_eq!(st.window_occupancy(), 1);
            assert_eq!(
                st.load_queue.len() + st.in_flight.iter().count() + st.loaded_count(),
                1
            );
            drive(&mut st, *id);
        }
        assert_eq!(st.loads_completed(), 8);
    }

    #[test]
    fn retained_block_stays() {
        let s = seq(2, false);
        let mut st = WindowState::new(s.clone(), 2, |id| id == BlockId::ffn(0)).unwrap();
        for (id, _) in &s {
            drive(&mut st, *id);
        }
        assert!(st.is_retained(BlockId::ffn(0)));
        // second pass: ffn.0 is still loaded, never reloaded
        let before = st.loads_completed();
        for (id, _) in &s {
            drive(&mut st, *id);
        }
        assert_eq!(st.loads_completed() - before, 3);
    }

    #[test]
    fn released_bytes_leave() {
        let s = seq(2, false);
        let mut st = WindowState::new(s, 2, |_| false).unwrap();
        assert_eq!(st.resident_bytes(), 40);
        drive(&mut st, BlockId::attn(0));
        // attn.0 (10) left, attn.1 (10) admitted
        assert_eq!(st.resident_bytes(), 40);
        drive(&mut st, BlockId::ffn(0));
        assert_eq!(st.resident_bytes(), 40);
        assert_eq!(st.peak_bytes(), 40);
    }

    #[test]
    fn window_is_capped_at_the_cycle() {
        let seq = alloc::vec![
            (BlockId::attn(0), 10),
            (BlockId::ffn(0), 20),
            (BlockId::attn(1), 30)
        ];
        let mut st = WindowState::new(seq, 5, |id| id == BlockId::ffn(0)).unwrap();
        assert_eq!(st.window(), 2);
        for id in [
            BlockId::attn(0),
            BlockId::ffn(0),
            BlockId::attn(1),
            BlockId::attn(0),
        ] {
            drive(&mut st, id);
        }
        assert_eq!(st.peak_bytes(), 60);
    }

    #[test]
    fn out_of_order_is_rejected() {
        let mut st = WindowState::new(seq(2, true), 2, |_| false).unwrap();
        assert!(matches!(
            st.acquire(BlockId::attn(0)),
            Err(WindowError::OutOfOrder { .. })
        ));
        assert_eq!(
            st.release(BlockId::PRE),
            Err(WindowError::NotAcquired(BlockId::PRE))
        );
    }

    #[test]
    fn peak_equals_largest_cyclic_window() {
        for w in 1..=6 {
            let s = seq(3, true);
            let mut st = WindowState::new(s.clone(), w, |_| false).unwrap();
            for (id, _) in s.iter().cycle().take(3 * s.len()) {
                drive(&mut st, *id);
            }
            let sizes: Vec<u64> = s.iter().map(|x| x.1).collect();
            assert_eq!(st.peak_bytes(), max_cyclic_window(&sizes, w), "w={w}");
        }
    }

    #[derive(Debug, Clone)]
    enum Act {
        Load,
        Step,
    }

    proptest! {
        #[test]
        fn window_bound_under_any_interleaving(
            w in 1usize..6,
            layers in 1usize..5,
            master in any::<bool>(),
            t in 1usize..4,
            acts in proptest::collection::vec(prop_oneof![Just(Act::Load), Just(Act::Step)], 1..200),
        ) {
            let s = seq(layers, master);
            let retain = move |id: BlockId| id.kind == crate::partition::BlockKind::Ffn && (id.layer as usize).is_multiple_of(t);
            let mut st = WindowState::new(s, w, retain).unwrap();
            let mut last_loaded: Option<u64> = None;
            let mut pending: Option<u64> = None;
            for a in acts {
                match a {
                    Act::Load => {
                        if let Some(g) = pending.take() {
                            st.finish_load(g).unwrap();
                        } else if let Some((g, _)) = st.start_next_load().unwrap() {
                            // loads start in admission order
                            if let Some(prev) = last_loaded { prop_assert!(g > prev); }
                            last_loaded = Some(g);
                            pending = Some(g);
                        }
                    }
                    Act::Step => {
                        let id = st.expected_next();
                        if st.acquired.is_none() {
                            st.acquire(id).unwrap();
                        }
                        let g = st.acquired.unwrap();
                        if st.is_loaded(g) {
                            st.release(id).unwrap();
                        }
                    }
                }
                prop_assert!(st.window_occupancy() <= w);
                prop_assert_eq!(st.resident_bytes(), st.recount_bytes());
                prop_assert!(st.peak_bytes() >= st.resident_bytes());
            }
        }
    }
}
