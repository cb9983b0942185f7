//! Concurrent evacuation: reclaims fragmented segments and segregates
//! recently-accessed objects into contiguous hot pages, raising the CAR
//! of reconstructed pages.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::Event;
use crate::error::{FmError, Result};
use crate::mem::addr::Space;
use crate::mem::page::{Generation, ObjState, Page, Residency, OBJ_HEADER_BYTES, TRANSITION_FREED};
use crate::refs::{update_references, RefInner, RefMeta};
use crate::runtime::Runtime;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvacReport {
    pub segments_scanned: u64,
    pub segments_freed: u64,
    pub objects_moved: u64,
    pub hot_moved: u64,
    pub cold_moved: u64,
    pub skipped_busy: u64,
}

struct LiveEntry {
    offset: u32,
    size: u32,
    main: Arc<RefInner>,
}

impl Runtime {
    /// One evacuation pass: local segments first, then remote segments
    /// when remote free space runs low (plus reclamation of fully-dead
    /// remote segments). Access bits of moved objects are cleared at the
    /// end of the cycle.
    pub fn evacuation_cycle(&self, garbage_threshold: f64) -> EvacReport {
        let _cycle = self.evac_cycle_lock.lock();
        let mut report = EvacReport::default();
        let mut moved_mains: Vec<Arc<RefInner>> = Vec::new();

        let candidates: Vec<Arc<Page>> = {
            let mut segs = self.segments.lock();
            segs.retain(|w| w.strong_count() > 0);
            segs.iter().filter_map(|w| w.upgrade()).collect()
        };

        // Local segments take priority.
        for page in candidates.iter().filter(|p| p.is_resident_hint()) {
            report.segments_scanned += 1;
            match self.evacuate_segment_inner(page, garbage_threshold, &mut report, &mut moved_mains)
            {
                Ok(()) => {}
                Err(FmError::SkippedBusy) => report.skipped_busy += 1,
                Err(_) => {}
            }
        }

        // Remote segments: always reclaim fully-dead ones; move live
        // objects out only under remote-space pressure.
        let remote_pressure = self
            .store
            .free_slot_fraction()
            .map(|f| f < self.cfg.remote_free_watermark)
            .unwrap_or(false);
        for page in candidates.iter().filter(|p| !p.is_resident_hint()) {
            report.segments_scanned += 1;
            match self.evacuate_remote_segment(page, remote_pressure, &mut report, &mut moved_mains)
            {
                Ok(()) => {}
                Err(FmError::SkippedBusy) => report.skipped_busy += 1,
                Err(_) => {}
            }
        }

        for main in moved_mains {
            main.clear_access();
        }
        report
    }

    /// Evacuate one segment if eligible: garbage ratio at or above the
    /// threshold, no pins, not an open TLAB. `SkippedBusy` means a scope
    /// arrived mid-move; the segment is retried next cycle.
    pub fn evacuate_segment(&self, page: &Arc<Page>, garbage_threshold: f64) -> Result<EvacReport> {
        let mut report = EvacReport::default();
        let mut moved: Vec<Arc<RefInner>> = Vec::new();
        report.segments_scanned = 1;
        let res = if page.is_resident_hint() {
            self.evacuate_segment_inner(page, garbage_threshold, &mut report, &mut moved)
        } else {
            self.evacuate_remote_segment(page, true, &mut report, &mut moved)
        };
        for m in moved {
            m.clear_access();
        }
        res.map(|_| report)
    }

    fn evacuate_segment_inner(
        &self,
        page: &Arc<Page>,
        garbage_threshold: f64,
        report: &mut EvacReport,
        moved_mains: &mut Vec<Arc<RefInner>>,
    ) -> Result<()> {
        let live: Vec<LiveEntry> = {
            let g = page.inner.lock();
            if g.residency != Residency::Local {
                return Ok(());
            }
            if page.open_tlab.load(Ordering::SeqCst) {
                return Ok(());
            }
            let Some(seg) = g.seg.as_ref() else { return Ok(()) };
            if seg.garbage_ratio(self.cfg.page_size) < garbage_threshold {
                return Ok(());
            }
            if page.deref_count() > 0 {
                return Err(FmError::SkippedBusy);
            }
            page.evacuating.store(true, Ordering::SeqCst);
            seg.records
                .iter()
                .filter(|r| r.state == ObjState::Live)
                .filter_map(|r| {
                    r.main.as_ref().map(|m| LiveEntry {
                        offset: r.offset,
                        size: r.size,
                        main: Arc::clone(m),
                    })
                })
                .collect()
        };

        let outcome = self.move_entries(page, live, false, report, moved_mains);
        page.evacuating.store(false, Ordering::SeqCst);
        outcome?;
        if self.try_free_dead_segment(page) {
            report.segments_freed += 1;
        }
        Ok(())
    }

    fn evacuate_remote_segment(
        &self,
        page: &Arc<Page>,
        move_live: bool,
        report: &mut EvacReport,
        moved_mains: &mut Vec<Arc<RefInner>>,
    ) -> Result<()> {
        let live: Vec<LiveEntry> = {
            let g = page.inner.lock();
            if g.residency != Residency::Remote || g.slot.is_none() {
                return Ok(());
            }
            let Some(seg) = g.seg.as_ref() else { return Ok(()) };
            seg.records
                .iter()
                .filter(|r| r.state == ObjState::Live)
                .filter_map(|r| {
                    r.main.as_ref().map(|m| LiveEntry {
                        offset: r.offset,
                        size: r.size,
                        main: Arc::clone(m),
                    })
                })
                .collect()
        };
        if !live.is_empty() && !move_live {
            return Ok(()); // delayed until accessed or space runs out
        }
        if !live.is_empty() {
            self.move_entries(page, live, true, report, moved_mains)?;
        }
        if self.try_free_dead_remote_segment(page) {
            report.segments_freed += 1;
        }
        Ok(())
    }

    /// Move live entries out of a source segment, hot and cold objects to
    /// separate target streams. Aborts with `SkippedBusy` the moment a
    /// scope pins the source page.
    fn move_entries(
        &self,
        src: &Arc<Page>,
        entries: Vec<LiveEntry>,
        remote_src: bool,
        report: &mut EvacReport,
        moved_mains: &mut Vec<Arc<RefInner>>,
    ) -> Result<()> {
        for e in entries {
            let word = e.main.load_word();
            let m = RefMeta::decode(word);
            let src_addr = src.base.add(e.offset as u64);
            if m.is_freed() || m.addr != src_addr.value() {
                continue; // freed or already re-homed
            }
            if m.is_moving || m.offload {
                return Err(FmError::SkippedBusy);
            }
            if e.main.try_begin_move(word).is_err() {
                return Err(FmError::SkippedBusy);
            }
            // Post-CAS pin recheck: a barrier that pinned before our CAS
            // must win (invariant #3).
            if src.deref_count() > 0 {
                e.main.clear_moving();
                return Err(FmError::SkippedBusy);
            }
            let hot = m.access;
            let size = e.size as usize;
            let dst = self.evac_tlab_alloc(src.space, hot, size);
            let (dst_page, dst_off) = match dst {
                Ok(v) => v,
                Err(err) => {
                    e.main.clear_moving();
                    return Err(err);
                }
            };
            let bytes = if remote_src {
                let g = src.inner.lock();
                let slot = g.slot.expect("remote segment keeps its slot");
                drop(g);
                self.store.load_object(slot, e.offset as usize, size)?
            } else {
                let g = src.inner.lock();
                let data = g.data.as_ref().expect("local segment has data");
                data[e.offset as usize..e.offset as usize + size].to_vec()
            };
            {
                let mut g = dst_page.inner.lock();
                let data = g.data.as_mut().unwrap();
                let hdr = dst_off - OBJ_HEADER_BYTES;
                data[hdr..hdr + 8].copy_from_slice(&e.main.id.to_le_bytes());
                data[dst_off..dst_off + size].copy_from_slice(&bytes);
                let seg = g.seg.as_mut().unwrap();
                let idx = seg.find_record(dst_off as u32).unwrap();
                seg.records[idx].main = Some(Arc::clone(&e.main));
            }
            {
                let mut g = src.inner.lock();
                if let Some(seg) = g.seg.as_mut() {
                    if let Some(idx) = seg.find_record(e.offset) {
                        let rec = &mut seg.records[idx];
                        if rec.state == ObjState::Live {
                            rec.state = ObjState::Dead;
                            rec.main = None;
                            seg.live_bytes -= rec.size as usize + OBJ_HEADER_BYTES;
                        }
                    }
                }
                self.audit.record(Event::EvacMove {
                    page: src.base.value(),
                    epoch: src.epoch(),
                });
            }
            let dst_addr = dst_page.base.add(dst_off as u64);
            update_references(&e.main, dst_addr);
            if hot {
                // Preserve the profiling signal: the moved object's cards
                // are marked on the target page.
                dst_page.cat.mark(dst_off, size);
                report.hot_moved += 1;
            } else {
                report.cold_moved += 1;
            }
            report.objects_moved += 1;
            moved_mains.push(Arc::clone(&e.main));
        }
        Ok(())
    }

    fn evac_tlab_alloc(&self, space: Space, hot: bool, size: usize) -> Result<(Arc<Page>, usize)> {
        let idx = match (space, hot) {
            (Space::Offload, true) => 2,
            (Space::Offload, false) => 3,
            (_, true) => 0,
            (_, false) => 1,
        };
        let generation = if hot { Generation::Hot } else { Generation::Cold };
        let mut ctx = self.evac_ctx.lock();
        self.tlab_alloc(&mut ctx.tlabs[idx], space, generation, size, true)
    }

    /// Free a local segment whose objects are all dead. Returns whether
    /// the page was freed.
    pub(crate) fn try_free_dead_segment(&self, page: &Arc<Page>) -> bool {
        let mut g = page.inner.lock();
        if g.residency != Residency::Local || page.open_tlab.load(Ordering::SeqCst) {
            return false;
        }
        let Some(seg) = g.seg.as_ref() else { return false };
        if !seg.retired || seg.records.iter().any(|r| r.state == ObjState::Live) {
            return false;
        }
        if page.deref_count() > 0 {
            return false;
        }
        g.data = None;
        if page.psf() == crate::mem::page::PathSelector::Paging {
            self.pool.note_paging_resident(-1);
        }
        page.set_resident_hint(false);
        let epoch = page.bump_epoch(TRANSITION_FREED);
        self.audit.record(Event::SegmentFreed {
            page: page.base.value(),
            epoch,
        });
        drop(g);
        self.pool.release();
        self.map.remove(&self.page_no(page.base));
        true
    }

    fn try_free_dead_remote_segment(&self, page: &Arc<Page>) -> bool {
        let mut g = page.inner.lock();
        if g.residency != Residency::Remote {
            return false;
        }
        let Some(seg) = g.seg.as_ref() else { return false };
        if seg.records.iter().any(|r| r.state == ObjState::Live) || seg.records.is_empty() {
            return false;
        }
        if page.deref_count() > 0 {
            return false;
        }
        if let Some(slot) = g.slot.take() {
            let _ = self.store.release_slot(slot);
        }
        page.bump_epoch(TRANSITION_FREED);
        self.audit.record(Event::SegmentFreed {
            page: page.base.value(),
            epoch: page.epoch(),
        });
        drop(g);
        self.map.remove(&self.page_no(page.base));
        true
    }

    /// Watermark-triggered tick: run a cycle when free pool capacity or
    /// remote free space drops too low.
    pub fn maybe_evacuate(&self) -> Option<EvacReport> {
        let pool_low = (self.pool.free_pages() as f64)
            < self.cfg.evac_free_watermark * self.pool.capacity_pages() as f64;
        let remote_low = self
            .store
            .free_slot_fraction()
            .map(|f| f < self.cfg.remote_free_watermark)
            .unwrap_or(false);
        if pool_low || remote_low {
            Some(self.evacuation_cycle(self.cfg.garbage_threshold))
        } else {
            None
        }
    }
}
