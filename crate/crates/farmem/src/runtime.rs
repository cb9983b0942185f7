//! The runtime: owns the page map, local pool, remote store, allocator
//! state, and the background-service entry points.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::config::{PathPolicy, RuntimeConfig};
use crate::error::{FmError, Result};
use crate::mem::addr::{Space, VirtAddr, HUGE_BASE, NORMAL_BASE, OFFLOAD_BASE};
use crate::mem::page::{
    Generation, ObjRecord, ObjState, Page, PathSelector, Residency, SegmentMeta, OBJ_HEADER_BYTES,
    TRANSITION_FREED,
};
use crate::mem::pool::LocalPool;
use crate::audit::AuditState;
use crate::baseline::ObjectLru;
use crate::refs::{
    chain_insert, resolve_main, RefHandle, RefInner, RefMeta, SharedRef, UniqueRef,
};
use crate::store::RemoteStore;

/// Largest size the reference metadata's 12-bit field can carry.
pub const MAX_NORMAL_OBJECT: usize = 4095;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WorkerId(pub usize);

/// Which allocation stream a TLAB feeds. Application allocations and
/// runtime fetches use separate buffers so temporally-adjacent fetches
/// co-locate without interleaving with fresh allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TlabKind {
    App = 0,
    Fetch = 1,
    OffloadApp = 2,
    OffloadFetch = 3,
}

pub(crate) struct WorkerCtx {
    pub tlabs: Mutex<[Option<Arc<Page>>; 4]>,
}

/// Evacuation target buffers: hot and cold streams per space.
pub(crate) struct EvacCtx {
    pub tlabs: [Option<Arc<Page>>; 4], // [normal hot, normal cold, offload hot, offload cold]
}

#[derive(Default)]
pub struct FlipCounters {
    pub runtime_to_paging: AtomicU64,
    pub paging_to_runtime: AtomicU64,
    pub forced: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FlipSnapshot {
    pub runtime_to_paging: u64,
    pub paging_to_runtime: u64,
    pub forced: u64,
}

pub type RemotableBody = Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>;

pub struct Runtime {
    pub(crate) cfg: RuntimeConfig,
    pub(crate) page_shift: u32,
    pub(crate) map: DashMap<u64, Arc<Page>>,
    pub(crate) pool: LocalPool,
    pub store: RemoteStore,
    pub(crate) clock: Mutex<std::collections::VecDeque<Arc<Page>>>,
    /// Every segment page ever created (weak; pruned lazily). Evacuation
    /// candidates come from here in creation order.
    pub(crate) segments: Mutex<Vec<std::sync::Weak<Page>>>,
    pub(crate) workers: RwLock<Vec<Arc<WorkerCtx>>>,
    pub(crate) evac_ctx: Mutex<EvacCtx>,
    pub(crate) evac_cycle_lock: Mutex<()>,
    next_normal: AtomicU64,
    next_huge: AtomicU64,
    next_offload: AtomicU64,
    next_ref_id: AtomicU64,
    pub(crate) huge_allocs: Mutex<HashMap<u64, usize>>,
    pub(crate) remotables: RwLock<HashMap<String, RemotableBody>>,
    pub(crate) lru: Mutex<ObjectLru>,
    pub audit: AuditState,
    pub flips: FlipCounters,
    /// Live objects by space (diagnostics).
    pub(crate) live_objects: AtomicUsize,
}

impl Runtime {
    pub fn new(cfg: RuntimeConfig) -> Result<Arc<Runtime>> {
        cfg.validate()?;
        let page_shift = cfg.page_shift();
        let store = RemoteStore::new(cfg.page_size, cfg.remote_capacity_pages, cfg.latency);
        Ok(Arc::new(Runtime {
            page_shift,
            pool: LocalPool::new(cfg.pool_capacity_pages),
            store,
            map: DashMap::new(),
            clock: Mutex::new(std::collections::VecDeque::new()),
            segments: Mutex::new(Vec::new()),
            workers: RwLock::new(Vec::new()),
            evac_ctx: Mutex::new(EvacCtx { tlabs: [None, None, None, None] }),
            evac_cycle_lock: Mutex::new(()),
            next_normal: AtomicU64::new(NORMAL_BASE),
            next_huge: AtomicU64::new(HUGE_BASE),
            next_offload: AtomicU64::new(OFFLOAD_BASE),
            next_ref_id: AtomicU64::new(1),
            huge_allocs: Mutex::new(HashMap::new()),
            remotables: RwLock::new(HashMap::new()),
            lru: Mutex::new(ObjectLru::new()),
            audit: AuditState::new(cfg.event_log),
            flips: FlipCounters::default(),
            live_objects: AtomicUsize::new(0),
            cfg,
        }))
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &LocalPool {
        &self.pool
    }

    pub fn register_worker(&self) -> WorkerId {
        let mut workers = self.workers.write();
        workers.push(Arc::new(WorkerCtx { tlabs: Mutex::new([None, None, None, None]) }));
        WorkerId(workers.len() - 1)
    }

    pub(crate) fn worker_ctx(&self, worker: WorkerId) -> Arc<WorkerCtx> {
        Arc::clone(&self.workers.read()[worker.0])
    }

    pub(crate) fn next_ref_id(&self) -> u64 {
        self.next_ref_id.fetch_add(1, Ordering::SeqCst)
    }

    // ---- page map ----------------------------------------------------

    #[inline]
    pub(crate) fn page_no(&self, addr: VirtAddr) -> u64 {
        addr.page(self.page_shift)
    }

    pub(crate) fn lookup_page(&self, addr: VirtAddr) -> Result<Arc<Page>> {
        self.map
            .get(&self.page_no(addr))
            .map(|e| Arc::clone(e.value()))
            .ok_or(FmError::UnmappedAddress(addr.value()))
    }

    /// The location check standing in for the hardware probe: an exact
    /// page-map lookup returning residency and the descriptor.
    pub fn locate(&self, addr: VirtAddr) -> Result<(Residency, Arc<Page>)> {
        let page = self.lookup_page(addr)?;
        let residency = page.residency();
        Ok((residency, page))
    }

    /// Set the card bits for the object extent `[addr, addr + size)`.
    /// The extent must lie within one page.
    pub fn mark_cards(&self, addr: VirtAddr, size: usize) -> Result<()> {
        if size == 0 {
            return Ok(());
        }
        let off = addr.offset_in_page(self.page_shift);
        if off + size > self.cfg.page_size {
            return Err(FmError::CrossesPageBoundary);
        }
        let page = self.lookup_page(addr)?;
        page.cat.mark(off, size);
        Ok(())
    }

    // ---- segment / page creation --------------------------------------

    pub(crate) fn bump_addr(&self, space: Space, bytes: u64) -> VirtAddr {
        let ctr = match space {
            Space::Normal => &self.next_normal,
            Space::Huge => &self.next_huge,
            Space::Offload => &self.next_offload,
            Space::Metadata => unreachable!("no data allocations in the metadata space"),
        };
        VirtAddr(ctr.fetch_add(bytes, Ordering::SeqCst))
    }

    /// Create one fresh resident page backed by a pool permit the caller
    /// has already acquired.
    pub(crate) fn install_page(
        &self,
        base: VirtAddr,
        space: Space,
        seg: Option<SegmentMeta>,
        psf: PathSelector,
    ) -> Arc<Page> {
        let page = Page::new_local(base, space, self.cfg.page_size, self.cfg.card_size, seg, psf);
        if psf == PathSelector::Paging {
            self.pool.note_paging_resident(1);
        }
        self.map.insert(self.page_no(base), Arc::clone(&page));
        self.clock_push(Arc::clone(&page));
        page
    }

    /// Acquire a fresh log-segment page for a TLAB.
    pub(crate) fn new_segment_page(
        &self,
        space: Space,
        generation: Generation,
        use_reserve: bool,
    ) -> Result<Arc<Page>> {
        self.acquire_resident_permit(use_reserve)?;
        let base = self.bump_addr(space, self.cfg.page_size as u64);
        let page = self.install_page(
            base,
            space,
            Some(SegmentMeta::new(generation)),
            PathSelector::Runtime,
        );
        self.segments.lock().push(Arc::downgrade(&page));
        Ok(page)
    }

    pub(crate) fn clock_push(&self, page: Arc<Page>) {
        self.clock.lock().push_back(page);
    }

    // ---- allocation ----------------------------------------------------

    /// Bump-allocate `size + header` bytes from the given TLAB slot,
    /// spilling to a fresh segment when the remainder cannot fit. Returns
    /// the page and the data offset of the new object.
    pub(crate) fn tlab_alloc(
        &self,
        slot: &mut Option<Arc<Page>>,
        space: Space,
        generation: Generation,
        size: usize,
        use_reserve: bool,
    ) -> Result<(Arc<Page>, usize)> {
        let need = size + OBJ_HEADER_BYTES;
        debug_assert!(need <= self.cfg.page_size);
        loop {
            if let Some(page) = slot.as_ref() {
                let mut g = page.inner.lock();
                let seg = g.seg.as_mut().expect("tlab page has segment metadata");
                if seg.fill + need <= self.cfg.page_size {
                    let obj_off = seg.fill + OBJ_HEADER_BYTES;
                    seg.records.push(ObjRecord {
                        offset: obj_off as u32,
                        size: size as u32,
                        state: ObjState::Live,
                        main: None,
                        last_useful_epoch: u64::MAX,
                    });
                    seg.fill += need;
                    seg.live_bytes += need;
                    let page = Arc::clone(page);
                    drop(g);
                    return Ok((page, obj_off));
                }
                // Spill: the tail becomes permanent padding, charged as
                // garbage immediately.
                seg.fill = self.cfg.page_size;
                seg.retired = true;
                drop(g);
                page.open_tlab.store(false, Ordering::SeqCst);
                *slot = None;
            }
            let page = self.new_segment_page(space, generation, use_reserve)?;
            page.open_tlab.store(true, Ordering::SeqCst);
            *slot = Some(page);
        }
    }

    pub(crate) fn worker_tlab_alloc(
        &self,
        worker: WorkerId,
        kind: TlabKind,
        size: usize,
    ) -> Result<(Arc<Page>, usize)> {
        let ctx = self.worker_ctx(worker);
        let mut tlabs = ctx.tlabs.lock();
        let space = match kind {
            TlabKind::App | TlabKind::Fetch => Space::Normal,
            TlabKind::OffloadApp | TlabKind::OffloadFetch => Space::Offload,
        };
        self.tlab_alloc(&mut tlabs[kind as usize], space, Generation::Fresh, size, false)
    }

    /// Attach a freshly created main reference to its record and write
    /// the object header (back-link to the main reference).
    pub(crate) fn attach_object(&self, page: &Arc<Page>, obj_off: usize, main: &Arc<RefInner>) {
        let mut g = page.inner.lock();
        let data = g.data.as_mut().expect("fresh segment page is resident");
        let hdr = obj_off - OBJ_HEADER_BYTES;
        data[hdr..hdr + 8].copy_from_slice(&main.id.to_le_bytes());
        let seg = g.seg.as_mut().unwrap();
        let idx = seg
            .find_record(obj_off as u32)
            .expect("record pushed by tlab_alloc");
        seg.records[idx].main = Some(Arc::clone(main));
    }

    /// Largest object the log-structured path can place: one page minus
    /// the object header.
    pub fn max_inline_object(&self) -> usize {
        (self.cfg.page_size - OBJ_HEADER_BYTES).min(MAX_NORMAL_OBJECT)
    }

    fn allocate_in(&self, worker: WorkerId, size: usize, kind: TlabKind) -> Result<UniqueRef> {
        if size == 0 {
            return Err(FmError::Config("zero-sized objects are not allocatable".into()));
        }
        if size > self.max_inline_object() {
            return Err(FmError::ObjectTooLarge(size));
        }
        let (page, obj_off) = self.worker_tlab_alloc(worker, kind, size)?;
        let addr = page.base.add(obj_off as u64);
        let main = RefInner::new_main(self.next_ref_id(), RefMeta::new(addr, size as u16));
        self.attach_object(&page, obj_off, &main);
        self.live_objects.fetch_add(1, Ordering::Relaxed);
        if self.cfg.path_policy == PathPolicy::ObjectOnly {
            self.lru.lock().insert(&main, size);
        }
        Ok(UniqueRef { inner: main })
    }

    /// Allocate a normal object for `worker`. Sizes that cannot share a
    /// page with their header route to the huge-object space.
    pub fn allocate(&self, worker: WorkerId, size: usize) -> Result<UniqueRef> {
        if size > self.max_inline_object() {
            return self.allocate_huge(size);
        }
        self.allocate_in(worker, size, TlabKind::App)
    }

    pub fn allocate_shared(&self, worker: WorkerId, size: usize) -> Result<SharedRef> {
        let u = self.allocate(worker, size)?;
        Ok(SharedRef { inner: u.inner })
    }

    /// Chain a new alias onto a shared reference. The alias mirrors the
    /// current metadata and is updated on every subsequent move.
    pub fn alias(&self, shared: &SharedRef) -> Result<SharedRef> {
        let main = resolve_main(&shared.inner)?;
        let alias = Arc::new(RefInner {
            id: self.next_ref_id(),
            meta: AtomicU64::new(main.load_word()),
            next: Mutex::new(crate::refs::ChainNext::None),
            main: Some(Arc::downgrade(&main)),
            chain_lock: Mutex::new(()),
        });
        chain_insert(&main, &alias);
        Ok(SharedRef { inner: alias })
    }

    /// Allocate in the huge-object space: whole pages, paging path only.
    pub fn allocate_huge(&self, size: usize) -> Result<UniqueRef> {
        if size <= self.max_inline_object() {
            return Err(FmError::Config(format!(
                "huge allocation of {size} bytes belongs on the normal path"
            )));
        }
        let pages = (size + self.cfg.page_size - 1) / self.cfg.page_size;
        let base = self.bump_addr(Space::Huge, (pages * self.cfg.page_size) as u64);
        let mut created: Vec<Arc<Page>> = Vec::with_capacity(pages);
        for i in 0..pages {
            if let Err(e) = self.acquire_resident_permit(false) {
                for p in &created {
                    self.drop_page(p);
                }
                return Err(e);
            }
            let page_base = base.add((i * self.cfg.page_size) as u64);
            created.push(self.install_page(page_base, Space::Huge, None, PathSelector::Paging));
        }
        self.huge_allocs.lock().insert(base.value(), size);
        // size field 0 is the huge sentinel; real length sits in the registry
        let main = RefInner::new_main(self.next_ref_id(), RefMeta::new(base, 0));
        self.live_objects.fetch_add(1, Ordering::Relaxed);
        Ok(UniqueRef { inner: main })
    }

    /// Allocate in the offload space (object-in, page-out).
    pub fn allocate_remotable(&self, worker: WorkerId, size: usize) -> Result<UniqueRef> {
        self.allocate_in(worker, size, TlabKind::OffloadApp)
    }

    pub fn huge_size_of(&self, base: VirtAddr) -> Option<usize> {
        self.huge_allocs.lock().get(&base.value()).copied()
    }

    // ---- death ----------------------------------------------------------

    /// Account an object as dead in its owning segment.
    pub fn mark_dead(&self, addr: VirtAddr, size: usize) -> Result<()> {
        let page = self.lookup_page(addr)?;
        let off = page.offset_of(addr) as u32;
        let mut g = page.inner.lock();
        let seg = g.seg.as_mut().ok_or(FmError::UnmappedAddress(addr.value()))?;
        let idx = seg
            .find_record(off)
            .ok_or(FmError::UnmappedAddress(addr.value()))?;
        let rec = &mut seg.records[idx];
        if rec.state == ObjState::Dead {
            return Err(FmError::DoubleFree);
        }
        debug_assert_eq!(rec.size as usize, size, "mark_dead size mismatch");
        rec.state = ObjState::Dead;
        rec.main = None;
        seg.live_bytes -= rec.size as usize + OBJ_HEADER_BYTES;
        Ok(())
    }

    /// Garbage ratio of the segment backing `page`.
    pub fn garbage_ratio_of(&self, page: &Page) -> f64 {
        page.inner
            .lock()
            .seg
            .as_ref()
            .map(|s| s.garbage_ratio(self.cfg.page_size))
            .unwrap_or(0.0)
    }

    /// Release an object entirely: segment accounting, object-region and
    /// LRU entries, and every reference on the chain.
    pub fn free<H: RefHandle>(&self, handle: H) -> Result<()> {
        let main = resolve_main(handle.inner())?;
        // Freeze the object against movers.
        let frozen = loop {
            let w = main.load_word();
            let m = RefMeta::decode(w);
            if m.is_freed() {
                return Err(FmError::DoubleFree);
            }
            if m.is_moving || m.offload {
                std::hint::spin_loop();
                continue;
            }
            match main.try_begin_move(w) {
                Ok(_) => break m,
                Err(_) => continue,
            }
        };
        if frozen.evicted_object() {
            self.store.drop_object_by_key(main.id)?;
        } else if frozen.size == 0 {
            self.free_huge(frozen.vaddr())?;
        } else {
            self.mark_dead(frozen.vaddr(), frozen.size as usize)?;
        }
        if self.cfg.path_policy == PathPolicy::ObjectOnly {
            self.lru.lock().remove(main.id);
        }
        // Poison every reference on the chain; dangling derefs then fail
        // with UnmappedAddress.
        {
            let _g = main.chain_lock.lock();
            for alias in crate::refs::chain_aliases(&main) {
                alias.poison();
            }
        }
        main.poison();
        self.live_objects.fetch_sub(1, Ordering::Relaxed);
        Ok(())
    }

    fn free_huge(&self, base: VirtAddr) -> Result<()> {
        let size = self
            .huge_allocs
            .lock()
            .remove(&base.value())
            .ok_or(FmError::UnmappedAddress(base.value()))?;
        let pages = (size + self.cfg.page_size - 1) / self.cfg.page_size;
        for i in 0..pages {
            let addr = base.add((i * self.cfg.page_size) as u64);
            let page = self.lookup_page(addr)?;
            self.drop_page(&page);
        }
        Ok(())
    }

    /// Remove a page from the map and release its local or remote backing.
    pub(crate) fn drop_page(&self, page: &Arc<Page>) {
        let mut g = page.inner.lock();
        match g.residency {
            Residency::Local => {
                g.data = None;
                if page.psf() == PathSelector::Paging {
                    self.pool.note_paging_resident(-1);
                }
                page.set_resident_hint(false);
                self.pool.release();
            }
            Residency::Remote => {
                if let Some(slot) = g.slot.take() {
                    let _ = self.store.release_slot(slot);
                }
            }
        }
        g.residency = Residency::Remote;
        page.bump_epoch(TRANSITION_FREED);
        drop(g);
        self.map.remove(&self.page_no(page.base));
    }

    // ---- stats ----------------------------------------------------------

    /// (card-table bytes, data-page bytes) over every mapped data page.
    pub fn metadata_footprint(&self) -> (u64, u64) {
        let mut cat = 0u64;
        let mut data = 0u64;
        for e in self.map.iter() {
            cat += e.value().cat.storage_bytes() as u64;
            data += self.cfg.page_size as u64;
        }
        (cat, data)
    }

    /// Fraction of resident pages whose path selector is Paging.
    pub fn psf_paging_fraction(&self) -> f64 {
        let resident = self.pool.resident_pages();
        if resident == 0 {
            return 0.0;
        }
        self.pool.paging_resident_pages() as f64 / resident as f64
    }

    pub fn flip_snapshot(&self) -> FlipSnapshot {
        FlipSnapshot {
            runtime_to_paging: self.flips.runtime_to_paging.load(Ordering::SeqCst),
            paging_to_runtime: self.flips.paging_to_runtime.load(Ordering::SeqCst),
            forced: self.flips.forced.load(Ordering::SeqCst),
        }
    }

    pub fn live_object_count(&self) -> usize {
        self.live_objects.load(Ordering::Relaxed)
    }

    /// Retire every open TLAB so evacuation and eviction can see all
    /// segments. Called between workload phases or at shutdown.
    pub fn quiesce(&self) {
        let workers: Vec<Arc<WorkerCtx>> = self.workers.read().iter().cloned().collect();
        for ctx in workers {
            let mut tlabs = ctx.tlabs.lock();
            for slot in tlabs.iter_mut() {
                if let Some(page) = slot.take() {
                    self.retire_segment(&page);
                }
            }
        }
        let mut evac = self.evac_ctx.lock();
        for slot in evac.tlabs.iter_mut() {
            if let Some(page) = slot.take() {
                self.retire_segment(&page);
            }
        }
    }

    /// Retire open TLABs and evict every idle local page. Returns the
    /// number of pages evicted; useful for cold-start setups.
    pub fn evict_all(&self) -> usize {
        self.quiesce();
        let pages: Vec<Arc<Page>> = self.map.iter().map(|e| Arc::clone(e.value())).collect();
        let mut evicted = 0;
        for page in pages {
            if let Ok(Some(_)) = self.try_page_out(&page) {
                evicted += 1;
            }
        }
        evicted
    }

    pub(crate) fn retire_segment(&self, page: &Arc<Page>) {
        let mut g = page.inner.lock();
        if let Some(seg) = g.seg.as_mut() {
            if !seg.retired {
                seg.fill = self.cfg.page_size;
                seg.retired = true;
            }
        }
        drop(g);
        page.open_tlab.store(false, Ordering::SeqCst);
    }
}
