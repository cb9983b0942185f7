//! Dereference scopes and the pre/post-scope barriers: the single entry
//! point for all data access.
//!
//! Entering a scope pins the object's page through its deref count before
//! anything else; a pinned page is skipped by eviction and evacuation.
//! Movers (fetch racers, the evacuator) take the object's `is_moving` bit
//! first and then re-check the pin; the barrier increments the pin first
//! and then re-reads the metadata. Under sequentially consistent ordering
//! at least one side observes the other, so a page is never evicted and
//! an object never moved while a scope addresses it.

use std::marker::PhantomData;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::audit::Event;
use crate::config::PathPolicy;
use crate::error::{FmError, Result};
use crate::mem::addr::Space;
use crate::mem::page::{ObjState, Page, PathSelector, Residency};
use crate::refs::{resolve_main, RefHandle, RefInner, RefMeta};
use crate::runtime::Runtime;

/// Ingress paths tagged per remote epoch for the invariant-#1 audit.
const EPOCH_PATH_RUNTIME: u8 = 1;
const EPOCH_PATH_PAGING: u8 = 2;

/// An active dereference: the window during which the direct address is
/// valid. Holds one deref-count increment on each page backing the
/// object (one page for normal objects). Not transferable across
/// threads while active.
pub struct DerefScope<'rt> {
    rt: &'rt Runtime,
    main: Arc<RefInner>,
    addr: crate::mem::addr::VirtAddr,
    size: usize,
    pages: Vec<(Arc<Page>, u64)>,
    exited: bool,
    _not_send: PhantomData<*mut ()>,
}

impl Runtime {
    /// Pre-scope barrier: pin, locate, and route through the page's path
    /// selector. Returns the scope carrying the direct address.
    pub fn deref<'rt, H: RefHandle>(&'rt self, handle: &H) -> Result<DerefScope<'rt>> {
        let main = resolve_main(handle.inner())?;
        self.pre_scope_barrier(main)
    }

    fn pre_scope_barrier(&self, main: Arc<RefInner>) -> Result<DerefScope<'_>> {
        let mut spins = 0u32;
        loop {
            let word = main.load_word();
            let m = RefMeta::decode(word);
            if m.is_freed() {
                return Err(FmError::UnmappedAddress(0));
            }
            if m.is_moving {
                backoff(&mut spins);
                continue;
            }
            if m.size == 0 {
                // Huge object: paging-only, may span pages.
                return self.deref_huge(main, m);
            }
            if self.cfg.path_policy == PathPolicy::ObjectOnly && m.evicted_object() {
                match self.fetch_evicted_object(&main, word) {
                    Ok(()) => continue, // re-read the fresh address
                    Err(FmError::SkippedBusy) => {
                        backoff(&mut spins);
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            let size = m.size as usize;
            let page = self.lookup_page(m.vaddr())?;
            page.pin(&self.pool);
            // Re-validate under the pin: a mover that won before our pin
            // shows up as a changed word.
            let w2 = main.load_word();
            let m2 = RefMeta::decode(w2);
            if m2.is_moving || m2.addr != m.addr {
                page.unpin(&self.pool);
                backoff(&mut spins);
                continue;
            }
            // Local fast path.
            {
                let mut g = page.inner.lock();
                if g.residency == Residency::Local {
                    let epoch = page.epoch();
                    self.touch_local(&page, &mut g, &main, m2.vaddr(), size);
                    self.audit
                        .record(Event::ScopeGrant { page: page.base.value(), epoch });
                    drop(g);
                    if self.cfg.path_policy == PathPolicy::ObjectOnly {
                        let mut lru = self.lru.lock();
                        lru.touch(main.id);
                        self.store.ledger.charge_evict_work(1);
                    }
                    return Ok(DerefScope {
                        rt: self,
                        addr: m2.vaddr(),
                        size,
                        pages: vec![(page.clone(), epoch)],
                        main,
                        exited: false,
                        _not_send: PhantomData,
                    });
                }
            }
            // Remote object: pick the ingress path.
            let runtime_path = match self.cfg.path_policy {
                PathPolicy::PagingOnly => page.space == Space::Offload,
                PathPolicy::ObjectOnly => true,
                PathPolicy::Hybrid => match page.space {
                    Space::Offload => true,
                    Space::Huge => false,
                    _ => page.psf() == PathSelector::Runtime,
                },
            };
            self.tag_epoch_path(&page, runtime_path);
            if !runtime_path {
                // Paging path: the whole page comes back at the same
                // address; no reference updating.
                if let Err(e) = self.page_in(&page) {
                    page.unpin(&self.pool);
                    return Err(e);
                }
                let mut g = page.inner.lock();
                debug_assert_eq!(g.residency, Residency::Local);
                let epoch = page.epoch();
                self.touch_local(&page, &mut g, &main, m2.vaddr(), size);
                self.audit
                    .record(Event::ScopeGrant { page: page.base.value(), epoch });
                drop(g);
                return Ok(DerefScope {
                    rt: self,
                    addr: m2.vaddr(),
                    size,
                    pages: vec![(page.clone(), epoch)],
                    main,
                    exited: false,
                    _not_send: PhantomData,
                });
            }
            // Runtime path: re-home the object into this worker's fetch
            // buffer. Losers of the move race retry and see the new
            // address.
            match self.fetch_object(&main, w2, &page) {
                Ok((new_addr, new_page)) => {
                    // fetch pinned the new page and released our old pin
                    let mut g = new_page.inner.lock();
                    let epoch = new_page.epoch();
                    self.touch_local(&new_page, &mut g, &main, new_addr, size);
                    self.audit
                        .record(Event::ScopeGrant { page: new_page.base.value(), epoch });
                    drop(g);
                    if self.cfg.path_policy == PathPolicy::ObjectOnly {
                        let mut lru = self.lru.lock();
                        lru.touch(main.id);
                        self.store.ledger.charge_evict_work(1);
                    }
                    return Ok(DerefScope {
                        rt: self,
                        addr: new_addr,
                        size,
                        pages: vec![(new_page, epoch)],
                        main,
                        exited: false,
                        _not_send: PhantomData,
                    });
                }
                Err(FmError::SkippedBusy) => {
                    // Lost the race; the winner installs the new address.
                    page.unpin(&self.pool);
                    backoff(&mut spins);
                    continue;
                }
                Err(e) => {
                    page.unpin(&self.pool);
                    return Err(e);
                }
            }
        }
    }

    fn deref_huge(&self, main: Arc<RefInner>, m: RefMeta) -> Result<DerefScope<'_>> {
        let base = m.vaddr();
        let size = self
            .huge_size_of(base)
            .ok_or(FmError::UnmappedAddress(base.value()))?;
        let n_pages = (size + self.cfg.page_size - 1) / self.cfg.page_size;
        let mut pages = Vec::with_capacity(n_pages);
        for i in 0..n_pages {
            let addr = base.add((i * self.cfg.page_size) as u64);
            let page = match self.lookup_page(addr) {
                Ok(p) => p,
                Err(e) => {
                    for (p, _) in &pages {
                        let p: &Arc<Page> = p;
                        p.unpin(&self.pool);
                    }
                    return Err(e);
                }
            };
            page.pin(&self.pool);
            if page.residency() == Residency::Remote {
                self.tag_epoch_path(&page, false);
                if let Err(e) = self.page_in(&page) {
                    page.unpin(&self.pool);
                    for (p, _) in &pages {
                        p.unpin(&self.pool);
                    }
                    return Err(e);
                }
            }
            let remaining = size - i * self.cfg.page_size;
            let span = remaining.min(self.cfg.page_size);
            page.cat.mark(0, span);
            page.ref_bit.store(true, Ordering::SeqCst);
            if page.loaded_this_epoch.load(Ordering::SeqCst) {
                // First touch this epoch counts the covered bytes useful.
                let epoch = page.epoch();
                let prev = page.useful_epoch.swap(epoch, Ordering::SeqCst);
                if prev != epoch {
                    self.store.ledger.add_useful(span as u64);
                }
            }
            let epoch = page.epoch();
            self.audit
                .record(Event::ScopeGrant { page: page.base.value(), epoch });
            pages.push((page, epoch));
        }
        main.set_access();
        Ok(DerefScope {
            rt: self,
            addr: base,
            size,
            pages,
            main,
            exited: false,
            _not_send: PhantomData,
        })
    }

    /// Local-object bookkeeping under the page lock: card marking, the
    /// CLOCK reference bit, the access bit, and first-touch-per-epoch
    /// useful-byte accounting for pages whose epoch began with a page-in.
    fn touch_local(
        &self,
        page: &Arc<Page>,
        g: &mut crate::mem::page::PageInner,
        main: &Arc<RefInner>,
        addr: crate::mem::addr::VirtAddr,
        size: usize,
    ) {
        let off = page.offset_of(addr);
        page.cat.mark(off, size);
        page.ref_bit.store(true, Ordering::SeqCst);
        main.set_access();
        if page.loaded_this_epoch.load(Ordering::SeqCst) {
            if let Some(seg) = g.seg.as_mut() {
                if let Some(idx) = seg.find_record(off as u32) {
                    let rec = &mut seg.records[idx];
                    let epoch = page.epoch();
                    if rec.last_useful_epoch != epoch && rec.state == ObjState::Live {
                        rec.last_useful_epoch = epoch;
                        self.store.ledger.add_useful(rec.size as u64);
                    }
                }
            }
        }
    }

    /// Tag the page's remote epoch with the path taken; a second path in
    /// the same epoch is an invariant-#1 violation.
    fn tag_epoch_path(&self, page: &Arc<Page>, runtime_path: bool) {
        let tag = if runtime_path { EPOCH_PATH_RUNTIME } else { EPOCH_PATH_PAGING };
        let prev = page
            .epoch_path
            .compare_exchange(0, tag, Ordering::SeqCst, Ordering::SeqCst);
        if let Err(existing) = prev {
            if existing != tag {
                self.audit.counters.path_mix.fetch_add(1, Ordering::SeqCst);
            }
        }
        if self.audit.logging() {
            self.audit.record(Event::Fetch {
                page: page.base.value(),
                epoch: page.epoch(),
                runtime_path,
            });
        }
    }

    /// Post-scope barrier: release every pin held by the scope, checking
    /// that no page transitioned while the scope was active.
    fn post_scope_barrier(&self, scope: &mut DerefScope<'_>) {
        if scope.exited {
            panic!("dereference scope exited twice");
        }
        scope.exited = true;
        for (page, entry_epoch) in scope.pages.drain(..) {
            if self.audit.logging() {
                let g = page.inner.lock();
                self.audit.record(Event::ScopeExit {
                    page: page.base.value(),
                    epoch: page.epoch(),
                });
                drop(g);
            }
            if page.epoch() != entry_epoch {
                self.audit
                    .note_epoch_torn(page.last_transition.load(Ordering::SeqCst));
            }
            page.unpin(&self.pool);
        }
    }
}

impl<'rt> DerefScope<'rt> {
    pub fn addr(&self) -> crate::mem::addr::VirtAddr {
        self.addr
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The page pinned by this scope (the first page for huge objects).
    pub fn page(&self) -> &Arc<Page> {
        &self.pages[0].0
    }

    pub fn main_ref(&self) -> &Arc<RefInner> {
        &self.main
    }

    /// Copy the object's bytes out.
    pub fn read(&self) -> Vec<u8> {
        let mut buf = vec![0u8; self.size];
        self.read_into(&mut buf);
        buf
    }

    pub fn read_into(&self, buf: &mut [u8]) {
        assert!(buf.len() <= self.size);
        let mut cursor = 0usize;
        for (page, _) in &self.pages {
            if cursor >= buf.len() {
                break;
            }
            let page_off = if cursor == 0 { page.offset_of(self.addr) } else { 0 };
            let span = (self.rt.cfg.page_size - page_off).min(buf.len() - cursor);
            let g = page.inner.lock();
            let data = g.data.as_ref().expect("scope page stays resident");
            buf[cursor..cursor + span].copy_from_slice(&data[page_off..page_off + span]);
            cursor += span;
        }
    }

    /// Overwrite the object's bytes (length must not exceed the object).
    pub fn write(&self, bytes: &[u8]) {
        assert!(bytes.len() <= self.size);
        let mut cursor = 0usize;
        for (page, _) in &self.pages {
            if cursor >= bytes.len() {
                break;
            }
            let page_off = if cursor == 0 { page.offset_of(self.addr) } else { 0 };
            let span = (self.rt.cfg.page_size - page_off).min(bytes.len() - cursor);
            let mut g = page.inner.lock();
            let data = g.data.as_mut().expect("scope page stays resident");
            data[page_off..page_off + span].copy_from_slice(&bytes[cursor..cursor + span]);
            cursor += span;
        }
    }

    /// Explicitly run the post-scope barrier.
    pub fn exit(mut self) {
        let rt = self.rt;
        rt.post_scope_barrier(&mut self);
    }
}

impl Drop for DerefScope<'_> {
    fn drop(&mut self) {
        if !self.exited {
            self.rt.post_scope_barrier(self);
        }
    }
}

#[inline]
fn backoff(spins: &mut u32) {
    *spins += 1;
    if *spins < 64 {
        std::hint::spin_loop();
    } else {
        std::thread::yield_now();
    }
}
