//! Object-granularity ingress: allocate a new local home, copy the
//! remote bytes, rewrite every reference, and charge the old copy as
//! remote garbage.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::error::{FmError, Result};
use crate::mem::addr::{Space, VirtAddr};
use crate::mem::page::{ObjState, Page, OBJ_HEADER_BYTES};
use crate::refs::{update_references, RefInner, RefMeta};
use crate::runtime::{Runtime, TlabKind, WorkerId};

std::thread_local! {
    // Identity of the worker performing the current dereference; fetches
    // land in this worker's fetch buffer so temporally-adjacent objects
    // co-locate.
    static CURRENT_WORKER: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Bind the calling thread to a worker id for fetch placement.
pub fn set_current_worker(w: WorkerId) {
    CURRENT_WORKER.with(|c| c.set(w.0));
}

pub(crate) fn current_worker() -> WorkerId {
    WorkerId(CURRENT_WORKER.with(|c| c.get()))
}

impl Runtime {
    /// Fetch one remote object through the runtime path. The caller holds
    /// a pin on `old_page` and has validated `expected_word` under it.
    ///
    /// On success the object lives at the returned address, the new page
    /// carries the caller's pin, and the old pin has been released. On
    /// `SkippedBusy` another thread won the move race; the caller re-reads
    /// the metadata and returns the winner's address (it fetches nothing).
    pub(crate) fn fetch_object(
        &self,
        main: &Arc<RefInner>,
        expected_word: u64,
        old_page: &Arc<Page>,
    ) -> Result<(VirtAddr, Arc<Page>)> {
        // The move-right gate precedes allocation: losers discard nothing.
        if main.try_begin_move(expected_word).is_err() {
            return Err(FmError::SkippedBusy);
        }
        let m = RefMeta::decode(expected_word);
        let size = m.size as usize;
        let worker = current_worker();
        let kind = if old_page.space == Space::Offload {
            // Remotable objects may only be re-homed into the offload space.
            TlabKind::OffloadFetch
        } else {
            TlabKind::Fetch
        };
        let (new_page, obj_off) = match self.worker_tlab_alloc(worker, kind, size) {
            Ok(v) => v,
            Err(e) => {
                main.clear_moving();
                return Err(e);
            }
        };
        let new_addr = new_page.base.add(obj_off as u64);
        // Pin the new home before releasing the old pin so the object is
        // never without a pinned page mid-fetch.
        new_page.pin(&self.pool);
        old_page.unpin(&self.pool);

        let old_off = old_page.offset_of(m.vaddr());
        let bytes = {
            let g = old_page.inner.lock();
            debug_assert!(g.slot.is_some(), "runtime path fetches from a remote page");
            let slot = g.slot.expect("pinned remote page keeps its slot");
            if let Some(seg) = g.seg.as_ref() {
                if let Some(idx) = seg.find_record(old_off as u32) {
                    if seg.records[idx].state == ObjState::Dead {
                        self.audit
                            .counters
                            .stale_remote_read
                            .fetch_add(1, Ordering::SeqCst);
                    }
                }
            }
            if self.audit.logging() {
                self.audit.record(crate::audit::Event::Fetch {
                    page: old_page.base.value(),
                    epoch: old_page.epoch(),
                    runtime_path: true,
                });
            }
            self.store.load_object(slot, old_off, size)?
        };
        {
            let mut g = new_page.inner.lock();
            let data = g.data.as_mut().expect("fresh fetch page is resident");
            let hdr = obj_off - OBJ_HEADER_BYTES;
            data[hdr..hdr + 8].copy_from_slice(&main.id.to_le_bytes());
            data[obj_off..obj_off + size].copy_from_slice(&bytes);
            let seg = g.seg.as_mut().unwrap();
            let idx = seg.find_record(obj_off as u32).unwrap();
            seg.records[idx].main = Some(Arc::clone(main));
        }
        // The old copy is dead remote garbage; its segment is reclaimed
        // lazily by remote evacuation.
        {
            let mut g = old_page.inner.lock();
            if let Some(seg) = g.seg.as_mut() {
                if let Some(idx) = seg.find_record(old_off as u32) {
                    let rec = &mut seg.records[idx];
                    if rec.state == ObjState::Live {
                        rec.state = ObjState::Dead;
                        rec.main = None;
                        seg.live_bytes -= rec.size as usize + OBJ_HEADER_BYTES;
                    }
                }
            }
        }
        update_references(main, new_addr);
        Ok((new_addr, new_page))
    }

    /// Object-only baseline: bring an individually-evicted object back
    /// from the object region.
    pub(crate) fn fetch_evicted_object(&self, main: &Arc<RefInner>, expected_word: u64) -> Result<()> {
        if main.try_begin_move(expected_word).is_err() {
            return Err(FmError::SkippedBusy);
        }
        let m = RefMeta::decode(expected_word);
        let size = m.size as usize;
        let worker = current_worker();
        let (new_page, obj_off) = match self.worker_tlab_alloc(worker, TlabKind::Fetch, size) {
            Ok(v) => v,
            Err(e) => {
                main.clear_moving();
                return Err(e);
            }
        };
        let new_addr = new_page.base.add(obj_off as u64);
        let bytes = match self.store.fetch_object_by_key(main.id) {
            Ok(b) => b,
            Err(e) => {
                main.clear_moving();
                return Err(e);
            }
        };
        {
            let mut g = new_page.inner.lock();
            let data = g.data.as_mut().unwrap();
            let hdr = obj_off - OBJ_HEADER_BYTES;
            data[hdr..hdr + 8].copy_from_slice(&main.id.to_le_bytes());
            data[obj_off..obj_off + size].copy_from_slice(&bytes);
            let seg = g.seg.as_mut().unwrap();
            let idx = seg.find_record(obj_off as u32).unwrap();
            seg.records[idx].main = Some(Arc::clone(main));
        }
        main.clear_reserve_bits(crate::refs::RESERVE_EVICTED);
        update_references(main, new_addr);
        {
            let mut lru = self.lru.lock();
            lru.insert(main, size);
            self.store.ledger.charge_evict_work(1);
        }
        Ok(())
    }
}
