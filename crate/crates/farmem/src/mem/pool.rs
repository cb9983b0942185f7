//! Local-memory pool accounting: a page-count capacity standing in for
//! the cgroup limit, plus the resident/pinned counters the replacement
//! and pin-pressure machinery read.

use std::sync::atomic::{AtomicUsize, Ordering};

pub struct LocalPool {
    capacity_pages: usize,
    /// Pages of capacity only the evacuator may claim, so compaction can
    /// make progress when the pool is otherwise full.
    reserve_pages: usize,
    resident: AtomicUsize,
    /// Resident pages whose deref count is nonzero.
    pinned: AtomicUsize,
    /// Resident pages whose path selector is currently Paging.
    paging_resident: AtomicUsize,
}

impl LocalPool {
    pub fn new(capacity_pages: usize) -> Self {
        LocalPool {
            capacity_pages,
            reserve_pages: (capacity_pages / 8).min(4).max(1),
            resident: AtomicUsize::new(0),
            pinned: AtomicUsize::new(0),
            paging_resident: AtomicUsize::new(0),
        }
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity_pages
    }

    pub fn resident_pages(&self) -> usize {
        self.resident.load(Ordering::SeqCst)
    }

    pub fn free_pages(&self) -> usize {
        self.capacity_pages
            .saturating_sub(self.resident.load(Ordering::SeqCst))
    }

    pub fn pinned_pages(&self) -> usize {
        self.pinned.load(Ordering::SeqCst)
    }

    pub fn paging_resident_pages(&self) -> usize {
        self.paging_resident.load(Ordering::SeqCst)
    }

    /// Claim one page of residency. Fails (returns false) when the pool
    /// is at capacity; the caller must reclaim and retry. Evacuation
    /// claims (`use_reserve`) may dip into the reserved headroom.
    pub fn try_acquire(&self, use_reserve: bool) -> bool {
        let limit = if use_reserve {
            self.capacity_pages
        } else {
            self.capacity_pages - self.reserve_pages
        };
        let mut cur = self.resident.load(Ordering::SeqCst);
        loop {
            if cur >= limit {
                return false;
            }
            match self.resident.compare_exchange(
                cur,
                cur + 1,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => return true,
                Err(actual) => cur = actual,
            }
        }
    }

    /// Release one page of residency (page-out or segment free).
    pub fn release(&self) {
        let prev = self.resident.fetch_sub(1, Ordering::SeqCst);
        debug_assert!(prev > 0, "pool residency underflow");
    }

    pub(crate) fn note_pinned(&self, delta: isize) {
        if delta > 0 {
            self.pinned.fetch_add(delta as usize, Ordering::SeqCst);
        } else {
            self.pinned.fetch_sub((-delta) as usize, Ordering::SeqCst);
        }
    }

    pub(crate) fn note_paging_resident(&self, delta: isize) {
        if delta > 0 {
            self.paging_resident.fetch_add(delta as usize, Ordering::SeqCst);
        } else {
            self.paging_resident.fetch_sub((-delta) as usize, Ordering::SeqCst);
        }
    }

    /// Fraction of the pool currently pinned by active scopes.
    pub fn pinned_fraction(&self) -> f64 {
        self.pinned.load(Ordering::SeqCst) as f64 / self.capacity_pages as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_is_enforced() {
        let pool = LocalPool::new(2);
        // reserve is 1 for a 2-page pool; the last page needs reserve rights
        assert!(pool.try_acquire(false));
        assert!(!pool.try_acquire(false));
        assert!(pool.try_acquire(true));
        assert!(!pool.try_acquire(true));
        pool.release();
        assert!(pool.try_acquire(true));
        assert_eq!(pool.resident_pages(), 2);
    }
}
