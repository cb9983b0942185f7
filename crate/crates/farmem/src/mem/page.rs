//! Page descriptors: residency, path selector, deref count, card table,
//! swap-slot binding, and the log-segment metadata for pages that back
//! the log-structured allocator.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::mem::addr::{Space, VirtAddr};
use crate::mem::card::CardAccessTable;
use crate::mem::pool::LocalPool;
use crate::refs::RefInner;
use crate::store::SlotId;

/// Bytes of the per-object header preceding each object in a log segment.
/// Holds the back-link to the object's main reference.
pub const OBJ_HEADER_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Local,
    Remote,
}

/// The per-page 1-bit path selector: which ingress path remote accesses
/// to this page take. Updated at page-out from the card access rate, or
/// force-flipped under pin pressure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSelector {
    Runtime,
    Paging,
}

impl PathSelector {
    fn from_u8(v: u8) -> PathSelector {
        if v == 0 {
            PathSelector::Runtime
        } else {
            PathSelector::Paging
        }
    }
    fn as_u8(self) -> u8 {
        match self {
            PathSelector::Runtime => 0,
            PathSelector::Paging => 1,
        }
    }
}

/// Segment generation: freshly allocated, or an evacuation target for
/// recently-accessed (hot) or idle (cold) objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    Fresh,
    Hot,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjState {
    Live,
    Dead,
}

/// Why a page's residency epoch last changed; used by the auditor to
/// attribute scope-vs-transition violations.
pub const TRANSITION_NONE: u8 = 0;
pub const TRANSITION_PAGE_OUT: u8 = 1;
pub const TRANSITION_PAGE_IN: u8 = 2;
pub const TRANSITION_EVACUATED: u8 = 3;
pub const TRANSITION_FREED: u8 = 4;

/// Per-object bookkeeping inside a segment. Records are appended in
/// allocation order, so they stay sorted by offset.
pub struct ObjRecord {
    pub offset: u32,
    pub size: u32,
    pub state: ObjState,
    /// Main reference of the object; dropped when the object dies.
    pub main: Option<Arc<RefInner>>,
    /// Residency epoch in which the object last contributed to
    /// `useful_bytes` (first touch per epoch on a loaded page).
    pub last_useful_epoch: u64,
}

/// Log-segment accounting for a page in the normal or offload space.
pub struct SegmentMeta {
    /// Bytes consumed from the segment, headers and spill padding included.
    pub fill: usize,
    /// Bytes of live objects (headers included).
    pub live_bytes: usize,
    pub generation: Generation,
    pub records: Vec<ObjRecord>,
    /// Set once the owning TLAB moved on; tail padding has been charged.
    pub retired: bool,
}

impl SegmentMeta {
    pub fn new(generation: Generation) -> Self {
        SegmentMeta {
            fill: 0,
            live_bytes: 0,
            generation,
            records: Vec::new(),
            retired: false,
        }
    }

    pub fn find_record(&self, offset: u32) -> Option<usize> {
        self.records.binary_search_by_key(&offset, |r| r.offset).ok()
    }

    /// Garbage ratio relative to the page: (fill - live) / page_size,
    /// zero for empty segments.
    pub fn garbage_ratio(&self, page_size: usize) -> f64 {
        if self.fill == 0 {
            return 0.0;
        }
        (self.fill - self.live_bytes) as f64 / page_size as f64
    }

    pub fn garbage_bytes(&self) -> usize {
        self.fill - self.live_bytes
    }
}

pub struct PageInner {
    pub residency: Residency,
    pub slot: Option<SlotId>,
    pub data: Option<Box<[u8]>>,
    /// Present for log-segment pages (normal/offload space), absent for
    /// huge-space pages.
    pub seg: Option<SegmentMeta>,
}

/// A page of the simulated heap. Fast-path state (deref count, reference
/// bit, path selector, card table) is atomic; residency, the swap slot,
/// the byte payload and segment metadata live under the page lock, which
/// doubles as the eviction/flip lock.
pub struct Page {
    pub base: VirtAddr,
    pub space: Space,
    pub page_size: usize,
    deref_count: AtomicU32,
    pub ref_bit: AtomicBool,
    psf: AtomicU8,
    /// Pin-pressure relief happened; the next page-out keeps the paging
    /// path instead of recomputing from the CAR.
    pub forced_paging: AtomicBool,
    /// Currently the open segment of some TLAB; skipped by eviction and
    /// evacuation.
    pub open_tlab: AtomicBool,
    /// Mid-evacuation; skipped by eviction.
    pub evacuating: AtomicBool,
    /// Lock-free mirror of `inner.residency == Local` for scan paths.
    resident_hint: AtomicBool,
    /// Bumped on every residency transition (and on free).
    epoch: AtomicU64,
    pub last_transition: AtomicU8,
    /// First ingress path observed in the current remote epoch:
    /// 0 = none, 1 = runtime, 2 = paging. Audits invariant #1.
    pub epoch_path: AtomicU8,
    /// The current residency epoch began with a page-in (data was
    /// transferred); touches count toward useful bytes.
    pub loaded_this_epoch: AtomicBool,
    /// Epoch in which this page last contributed useful bytes; only huge
    /// pages use it (normal objects account per record).
    pub useful_epoch: AtomicU64,
    pub cat: CardAccessTable,
    pub inner: Mutex<PageInner>,
}

impl Page {
    pub fn new_local(
        base: VirtAddr,
        space: Space,
        page_size: usize,
        card_size: usize,
        seg: Option<SegmentMeta>,
        initial_psf: PathSelector,
    ) -> Arc<Page> {
        Arc::new(Page {
            base,
            space,
            page_size,
            deref_count: AtomicU32::new(0),
            ref_bit: AtomicBool::new(true),
            psf: AtomicU8::new(initial_psf.as_u8()),
            forced_paging: AtomicBool::new(false),
            open_tlab: AtomicBool::new(false),
            evacuating: AtomicBool::new(false),
            resident_hint: AtomicBool::new(true),
            epoch: AtomicU64::new(0),
            last_transition: AtomicU8::new(TRANSITION_NONE),
            epoch_path: AtomicU8::new(0),
            loaded_this_epoch: AtomicBool::new(false),
            useful_epoch: AtomicU64::new(u64::MAX),
            cat: CardAccessTable::new(page_size, card_size),
            inner: Mutex::new(PageInner {
                residency: Residency::Local,
                slot: None,
                data: Some(vec![0u8; page_size].into_boxed_slice()),
                seg,
            }),
        })
    }

    #[inline]
    pub fn deref_count(&self) -> u32 {
        self.deref_count.load(Ordering::SeqCst)
    }

    /// Increment the deref count (enter a scope or hold a transient pin).
    /// Returns the new count. The SeqCst ordering pairs with the movers'
    /// post-CAS recheck and the evictor's in-lock recheck.
    pub fn pin(&self, pool: &LocalPool) -> u32 {
        let prev = self.deref_count.fetch_add(1, Ordering::SeqCst);
        if prev == 0 {
            pool.note_pinned(1);
        }
        prev + 1
    }

    /// Decrement the deref count. Underflow is a programming error and
    /// aborts the run.
    pub fn unpin(&self, pool: &LocalPool) -> u32 {
        let prev = self.deref_count.fetch_sub(1, Ordering::SeqCst);
        if prev == 0 {
            panic!("deref count underflow on page {}", self.base);
        }
        if prev == 1 {
            pool.note_pinned(-1);
        }
        prev - 1
    }

    #[inline]
    pub fn psf(&self) -> PathSelector {
        PathSelector::from_u8(self.psf.load(Ordering::SeqCst))
    }

    /// Path-selector writes happen only at page-out or pin-pressure
    /// relief, with the page lock held.
    pub fn set_psf(&self, v: PathSelector) {
        self.psf.store(v.as_u8(), Ordering::SeqCst);
    }

    #[inline]
    pub fn is_resident_hint(&self) -> bool {
        self.resident_hint.load(Ordering::SeqCst)
    }

    pub fn set_resident_hint(&self, v: bool) {
        self.resident_hint.store(v, Ordering::SeqCst);
    }

    #[inline]
    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::SeqCst)
    }

    pub fn bump_epoch(&self, transition: u8) -> u64 {
        self.last_transition.store(transition, Ordering::SeqCst);
        self.epoch.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// Residency as visible through the lock. Snapshot accessor.
    pub fn residency(&self) -> Residency {
        self.inner.lock().residency
    }

    /// Offset of `addr` within this page.
    #[inline]
    pub fn offset_of(&self, addr: VirtAddr) -> usize {
        (addr.value() - self.base.value()) as usize
    }
}

impl std::fmt::Debug for Page {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Page")
            .field("base", &self.base)
            .field("space", &self.space)
            .field("deref_count", &self.deref_count())
            .field("psf", &self.psf())
            .field("resident", &self.is_resident_hint())
            .finish()
    }
}
