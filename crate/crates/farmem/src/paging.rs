//! The page-granularity engine: demand page-in, CLOCK second-chance
//! victim selection that honors pins, page-out with CAR measurement and
//! path-selector update, and the pinned-memory pressure valve.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::audit::Event;
use crate::config::PathPolicy;
use crate::error::{FmError, Result};
use crate::mem::addr::Space;
use crate::mem::page::{Page, PathSelector, Residency, TRANSITION_PAGE_IN, TRANSITION_PAGE_OUT};
use crate::runtime::Runtime;
use crate::store::{SlotId, StoreRegion};

impl Runtime {
    /// Restore a remote page at its own virtual address. No reference
    /// metadata changes. Idempotent under races: the first in wins.
    pub fn page_in(&self, page: &Arc<Page>) -> Result<()> {
        loop {
            {
                let g = page.inner.lock();
                if g.residency == Residency::Local {
                    page.ref_bit.store(true, Ordering::SeqCst);
                    return Ok(());
                }
            }
            self.acquire_resident_permit(false)?;
            let mut g = page.inner.lock();
            if g.residency == Residency::Local {
                // Raced with another page-in; hand the permit back.
                self.pool.release();
                page.ref_bit.store(true, Ordering::SeqCst);
                return Ok(());
            }
            let slot = g.slot.take().expect("remote page has a bound slot");
            let data = self.store.load_page(slot)?;
            debug_assert_eq!(page.cat.set_count(), 0, "CAT cleared at page-out");
            g.data = Some(data);
            g.residency = Residency::Local;
            page.set_resident_hint(true);
            page.loaded_this_epoch.store(true, Ordering::SeqCst);
            let epoch = page.bump_epoch(TRANSITION_PAGE_IN);
            page.ref_bit.store(true, Ordering::SeqCst);
            if page.psf() == PathSelector::Paging {
                self.pool.note_paging_resident(1);
            }
            self.audit.record(Event::PageIn { page: page.base.value(), epoch });
            drop(g);
            self.clock_push(Arc::clone(page));
            return Ok(());
        }
    }

    /// Evict `page` if it is idle: local, unpinned, not an open TLAB and
    /// not mid-evacuation. Computes the CAR, updates the path selector,
    /// clears the CAT, and binds a swap slot. Returns `None` when the
    /// page was ineligible.
    pub fn try_page_out(&self, page: &Arc<Page>) -> Result<Option<SlotId>> {
        let mut g = page.inner.lock();
        if g.residency != Residency::Local {
            return Ok(None);
        }
        if page.open_tlab.load(Ordering::SeqCst) || page.evacuating.load(Ordering::SeqCst) {
            return Ok(None);
        }
        let pinned = page.deref_count();
        if pinned > 0 {
            // Invariant #2: pinned pages are skipped at selection time.
            return Ok(None);
        }
        let old_psf = page.psf();
        let car = page.cat.car();
        let new_psf = match page.space {
            Space::Huge => PathSelector::Paging,
            Space::Offload => PathSelector::Runtime,
            Space::Normal | Space::Metadata => {
                if self.cfg.path_policy == PathPolicy::PagingOnly {
                    PathSelector::Paging
                } else if page.forced_paging.swap(false, Ordering::SeqCst) {
                    PathSelector::Paging
                } else if car >= self.cfg.car_threshold {
                    PathSelector::Paging
                } else {
                    PathSelector::Runtime
                }
            }
        };
        let data = g.data.take().expect("local page has data");
        let region = if page.space == Space::Offload {
            StoreRegion::Offload
        } else {
            StoreRegion::Swap
        };
        let slot = match self.store.store_page_or_give_back(data, region, page.base) {
            Ok(slot) => slot,
            Err((e, data)) => {
                g.data = Some(data);
                return Err(e);
            }
        };
        match (old_psf, new_psf) {
            (PathSelector::Runtime, PathSelector::Paging) => {
                self.flips.runtime_to_paging.fetch_add(1, Ordering::SeqCst);
            }
            (PathSelector::Paging, PathSelector::Runtime) => {
                self.flips.paging_to_runtime.fetch_add(1, Ordering::SeqCst);
            }
            _ => {}
        }
        page.set_psf(new_psf);
        page.cat.clear();
        g.slot = Some(slot);
        g.residency = Residency::Remote;
        page.set_resident_hint(false);
        page.epoch_path.store(0, Ordering::SeqCst);
        page.loaded_this_epoch.store(false, Ordering::SeqCst);
        let epoch = page.bump_epoch(TRANSITION_PAGE_OUT);
        if old_psf == PathSelector::Paging {
            self.pool.note_paging_resident(-1);
        }
        if pinned > 0 {
            // Unreachable by construction; counted, never silently fixed.
            self.audit.counters.pageout_pinned.fetch_add(1, Ordering::SeqCst);
        }
        self.audit.record(Event::PageOut {
            page: page.base.value(),
            epoch,
            deref_count: pinned,
            paging_psf: new_psf == PathSelector::Paging,
        });
        self.pool.release();
        Ok(Some(slot))
    }

    /// CLOCK second chance over resident pages: clear reference bits as
    /// the hand passes, return up to `n` idle cold pages in hand order.
    /// Pages stay resident; callers evict explicitly. Each resident page
    /// scanned charges one eviction work unit.
    pub fn select_victims(&self, n: usize) -> Result<Vec<Arc<Page>>> {
        assert!(n >= 1);
        let mut ring = self.clock.lock();
        let mut out = Vec::new();
        let budget = 2 * ring.len() + 1;
        for _ in 0..budget {
            if out.len() >= n {
                break;
            }
            let Some(page) = ring.pop_front() else { break };
            if !page.is_resident_hint() {
                continue; // tombstone
            }
            self.store.ledger.charge_evict_work(1);
            if page.open_tlab.load(Ordering::SeqCst)
                || page.evacuating.load(Ordering::SeqCst)
                || page.deref_count() > 0
            {
                ring.push_back(page);
                continue;
            }
            if page.ref_bit.swap(false, Ordering::SeqCst) {
                ring.push_back(page);
                continue;
            }
            out.push(Arc::clone(&page));
            ring.push_back(page);
        }
        if out.is_empty() {
            return Err(FmError::NoVictims);
        }
        Ok(out)
    }

    /// Evict one page chosen by the CLOCK hand. Holds the ring lock for
    /// the duration, serializing reclaim like a single swap-out thread.
    pub(crate) fn reclaim_one(&self) -> Result<()> {
        let mut ring = self.clock.lock();
        let budget = 2 * ring.len() + 1;
        for _ in 0..budget {
            let Some(page) = ring.pop_front() else { break };
            if !page.is_resident_hint() {
                // Dropped from the ring; heal the race with a concurrent
                // page-in that saw the stale entry.
                if page.is_resident_hint() {
                    ring.push_back(page);
                }
                continue;
            }
            self.store.ledger.charge_evict_work(1);
            if page.open_tlab.load(Ordering::SeqCst)
                || page.evacuating.load(Ordering::SeqCst)
                || page.deref_count() > 0
            {
                ring.push_back(page);
                continue;
            }
            if page.ref_bit.swap(false, Ordering::SeqCst) {
                ring.push_back(page);
                continue;
            }
            match self.try_page_out(&page)? {
                Some(_) => {
                    ring.push_back(page); // tombstone until next pass
                    return Ok(());
                }
                None => {
                    ring.push_back(page);
                    continue;
                }
            }
        }
        Err(FmError::NoVictims)
    }

    /// Force the path selector of pinned pages to Paging so their next
    /// eviction/re-entry cycle avoids reference updating. Returns the
    /// number of flips.
    pub fn relieve_pin_pressure(&self) -> usize {
        let pages: Vec<Arc<Page>> = {
            let ring = self.clock.lock();
            ring.iter()
                .filter(|p| p.is_resident_hint() && p.deref_count() > 0)
                .cloned()
                .collect()
        };
        let mut flips = 0;
        for page in pages {
            if page.space != Space::Normal {
                continue; // huge is already paging-only; offload must stay object-in
            }
            let g = page.inner.lock();
            if g.residency != Residency::Local || page.deref_count() == 0 {
                continue;
            }
            if page.psf() == PathSelector::Runtime {
                page.set_psf(PathSelector::Paging);
                page.forced_paging.store(true, Ordering::SeqCst);
                self.pool.note_paging_resident(1);
                self.flips.forced.fetch_add(1, Ordering::SeqCst);
                self.audit.record(Event::PsfFlip { page: page.base.value(), forced: true });
                flips += 1;
            }
        }
        flips
    }

    /// Claim one page of local capacity, evicting (or relieving pin
    /// pressure) as needed.
    pub(crate) fn acquire_resident_permit(&self, use_reserve: bool) -> Result<()> {
        if self.pool.pinned_fraction() > self.cfg.pin_watermark {
            self.relieve_pin_pressure();
        }
        let mut stalls = 0u32;
        loop {
            if self.pool.try_acquire(use_reserve) {
                return Ok(());
            }
            let step = if self.cfg.path_policy == PathPolicy::ObjectOnly {
                self.object_reclaim_step()
            } else {
                self.reclaim_one()
            };
            match step {
                Ok(()) => continue,
                Err(FmError::NoVictims) => {
                    let flips = self.relieve_pin_pressure();
                    stalls += 1;
                    if flips == 0 && stalls > 64 {
                        return Err(FmError::OutOfMemory(
                            "local pool exhausted: every resident page is pinned",
                        ));
                    }
                    std::thread::yield_now();
                }
                Err(e) => return Err(e),
            }
        }
    }
}
