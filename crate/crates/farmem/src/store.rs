//! Simulated far memory: page-granularity swap slots, sub-page object
//! reads, an address-aligned offload region, and the transfer ledger the
//! amplification and eviction-cost metrics derive from.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use dashmap::DashMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};
use crate::mem::addr::VirtAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub u64);

/// Which remote region a slot belongs to. Offload-region slots keep the
/// evicted page's virtual address so remote functions can run in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreRegion {
    Swap,
    Offload,
}

struct SlotEntry {
    bytes: Box<[u8]>,
    aligned_addr: Option<VirtAddr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// Advance simulated time only; deterministic and fast.
    AccountOnly,
    /// Additionally delay the calling thread.
    Sleep,
}

/// Transfer-cost model: a fixed cost per store operation plus a per-byte
/// cost, accumulated into a simulated clock.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyModel {
    pub per_op_ns: u64,
    pub per_byte_ps: u64,
    pub mode: LatencyMode,
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Ballpark RDMA figures: ~2us per operation, ~80ps per byte.
        LatencyModel {
            per_op_ns: 2_000,
            per_byte_ps: 80,
            mode: LatencyMode::AccountOnly,
        }
    }
}

impl LatencyModel {
    fn cost_ns(&self, bytes: usize) -> u64 {
        self.per_op_ns + (self.per_byte_ps * bytes as u64) / 1000
    }
}

/// Monotonic counters of data moved in each direction plus useful bytes.
/// io_amplification = bytes_in / useful_bytes; eviction economy =
/// evict_work_units / bytes_out.
#[derive(Default)]
pub struct TransferLedger {
    pub pages_in: AtomicU64,
    pub pages_out: AtomicU64,
    pub objects_in: AtomicU64,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
    pub useful_bytes: AtomicU64,
    pub evict_work_units: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub pages_in: u64,
    pub pages_out: u64,
    pub objects_in: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub useful_bytes: u64,
    pub evict_work_units: u64,
}

impl LedgerSnapshot {
    pub fn io_amplification(&self) -> f64 {
        if self.useful_bytes == 0 {
            0.0
        } else {
            self.bytes_in as f64 / self.useful_bytes as f64
        }
    }

    pub fn evict_work_per_byte(&self) -> f64 {
        if self.bytes_out == 0 {
            0.0
        } else {
            self.evict_work_units as f64 / self.bytes_out as f64
        }
    }

    pub fn minus(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            pages_in: self.pages_in - earlier.pages_in,
            pages_out: self.pages_out - earlier.pages_out,
            objects_in: self.objects_in - earlier.objects_in,
            bytes_in: self.bytes_in - earlier.bytes_in,
            bytes_out: self.bytes_out - earlier.bytes_out,
            useful_bytes: self.useful_bytes - earlier.useful_bytes,
            evict_work_units: self.evict_work_units - earlier.evict_work_units,
        }
    }
}

impl TransferLedger {
    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            pages_in: self.pages_in.load(Ordering::SeqCst),
            pages_out: self.pages_out.load(Ordering::SeqCst),
            objects_in: self.objects_in.load(Ordering::SeqCst),
            bytes_in: self.bytes_in.load(Ordering::SeqCst),
            bytes_out: self.bytes_out.load(Ordering::SeqCst),
            useful_bytes: self.useful_bytes.load(Ordering::SeqCst),
            evict_work_units: self.evict_work_units.load(Ordering::SeqCst),
        }
    }

    pub fn add_useful(&self, bytes: u64) {
        self.useful_bytes.fetch_add(bytes, Ordering::SeqCst);
    }

    pub fn charge_evict_work(&self, units: u64) {
        self.evict_work_units.fetch_add(units, Ordering::SeqCst);
    }
}

/// The remote side of the simulator. Slots are keyed by opaque ids; the
/// page size is fixed at construction. A separate byte-keyed object
/// region backs the object-only baseline's per-object eviction.
pub struct RemoteStore {
    page_size: usize,
    slots: DashMap<u64, SlotEntry>,
    next_slot: AtomicU64,
    capacity_pages: Option<usize>,
    used_pages: AtomicUsize,
    object_region: Mutex<HashMap<u64, Box<[u8]>>>,
    object_region_bytes: AtomicU64,
    pub ledger: TransferLedger,
    latency: LatencyModel,
    sim_time_ns: AtomicU64,
}

impl RemoteStore {
    pub fn new(page_size: usize, capacity_pages: Option<usize>, latency: LatencyModel) -> Self {
        RemoteStore {
            page_size,
            slots: DashMap::new(),
            next_slot: AtomicU64::new(1),
            capacity_pages,
            used_pages: AtomicUsize::new(0),
            object_region: Mutex::new(HashMap::new()),
            object_region_bytes: AtomicU64::new(0),
            ledger: TransferLedger::default(),
            latency,
            sim_time_ns: AtomicU64::new(0),
        }
    }

    pub fn simulated_time_ns(&self) -> u64 {
        self.sim_time_ns.load(Ordering::SeqCst)
    }

    fn charge(&self, bytes: usize) {
        let ns = self.latency.cost_ns(bytes);
        self.sim_time_ns.fetch_add(ns, Ordering::SeqCst);
        if self.latency.mode == LatencyMode::Sleep {
            std::thread::sleep(std::time::Duration::from_nanos(ns));
        }
    }

    pub fn used_slots(&self) -> usize {
        self.used_pages.load(Ordering::SeqCst)
    }

    pub fn free_slot_fraction(&self) -> Option<f64> {
        self.capacity_pages.map(|cap| {
            if cap == 0 {
                0.0
            } else {
                (cap.saturating_sub(self.used_slots())) as f64 / cap as f64
            }
        })
    }

    /// Persist one page of bytes; the slot owns the payload. Offload-region
    /// stores record the page's virtual address.
    pub fn store_page(
        &self,
        bytes: Box<[u8]>,
        region: StoreRegion,
        page_addr: VirtAddr,
    ) -> Result<SlotId> {
        self.store_page_or_give_back(bytes, region, page_addr)
            .map_err(|(e, _)| e)
    }

    /// As `store_page`, but hands the payload back on failure so the
    /// caller can restore the page.
    pub(crate) fn store_page_or_give_back(
        &self,
        bytes: Box<[u8]>,
        region: StoreRegion,
        page_addr: VirtAddr,
    ) -> std::result::Result<SlotId, (FmError, Box<[u8]>)> {
        assert_eq!(bytes.len(), self.page_size, "payload must be one page");
        if let Some(cap) = self.capacity_pages {
            let mut used = self.used_pages.load(Ordering::SeqCst);
            loop {
                if used >= cap {
                    return Err((FmError::StoreFull, bytes));
                }
                match self.used_pages.compare_exchange(
                    used,
                    used + 1,
                    Ordering::SeqCst,
                    Ordering::SeqCst,
                ) {
                    Ok(_) => break,
                    Err(actual) => used = actual,
                }
            }
        } else {
            self.used_pages.fetch_add(1, Ordering::SeqCst);
        }
        let id = self.next_slot.fetch_add(1, Ordering::SeqCst);
        let aligned_addr = match region {
            StoreRegion::Offload => Some(page_addr),
            StoreRegion::Swap => None,
        };
        self.slots.insert(id, SlotEntry { bytes, aligned_addr });
        self.ledger.pages_out.fetch_add(1, Ordering::SeqCst);
        self.ledger
            .bytes_out
            .fetch_add(self.page_size as u64, Ordering::SeqCst);
        self.charge(self.page_size);
        Ok(SlotId(id))
    }

    /// Fetch a whole page back; the slot is released.
    pub fn load_page(&self, slot: SlotId) -> Result<Box<[u8]>> {
        let (_, entry) = self.slots.remove(&slot.0).ok_or(FmError::DeadSlot)?;
        self.used_pages.fetch_sub(1, Ordering::SeqCst);
        self.ledger.pages_in.fetch_add(1, Ordering::SeqCst);
        self.ledger
            .bytes_in
            .fetch_add(self.page_size as u64, Ordering::SeqCst);
        self.charge(self.page_size);
        Ok(entry.bytes)
    }

    /// Fetch one object's bytes out of a live slot. The slot stays live:
    /// remaining objects may still be fetched or the page later paged in.
    pub fn load_object(&self, slot: SlotId, offset: usize, size: usize) -> Result<Vec<u8>> {
        let entry = self.slots.get(&slot.0).ok_or(FmError::DeadSlot)?;
        if offset + size > entry.bytes.len() {
            return Err(FmError::OutOfRange);
        }
        let out = entry.bytes[offset..offset + size].to_vec();
        drop(entry);
        self.ledger.objects_in.fetch_add(1, Ordering::SeqCst);
        self.ledger.bytes_in.fetch_add(size as u64, Ordering::SeqCst);
        self.ledger
            .useful_bytes
            .fetch_add(size as u64, Ordering::SeqCst);
        self.charge(size);
        Ok(out)
    }

    /// Read slot bytes without a transfer charge. Models remote-side
    /// execution touching data in place (offload invocations).
    pub fn peek(&self, slot: SlotId, offset: usize, size: usize) -> Result<Vec<u8>> {
        let entry = self.slots.get(&slot.0).ok_or(FmError::DeadSlot)?;
        if offset + size > entry.bytes.len() {
            return Err(FmError::OutOfRange);
        }
        Ok(entry.bytes[offset..offset + size].to_vec())
    }

    pub fn slot_aligned_addr(&self, slot: SlotId) -> Result<Option<VirtAddr>> {
        let entry = self.slots.get(&slot.0).ok_or(FmError::DeadSlot)?;
        Ok(entry.aligned_addr)
    }

    /// Drop a slot without a transfer (remote-segment reclamation).
    pub fn release_slot(&self, slot: SlotId) -> Result<()> {
        self.slots.remove(&slot.0).ok_or(FmError::DeadSlot)?;
        self.used_pages.fetch_sub(1, Ordering::SeqCst);
        Ok(())
    }

    /// Charge the shipped result of an offload invocation.
    pub fn charge_offload_result(&self, bytes: usize) {
        self.ledger
            .bytes_in
            .fetch_add(bytes as u64, Ordering::SeqCst);
        self.ledger
            .useful_bytes
            .fetch_add(bytes as u64, Ordering::SeqCst);
        self.charge(bytes);
    }

    // Object-granularity region for the object-only baseline's egress.

    pub fn evict_object(&self, key: u64, bytes: Vec<u8>) {
        let len = bytes.len() as u64;
        self.object_region
            .lock()
            .insert(key, bytes.into_boxed_slice());
        self.object_region_bytes.fetch_add(len, Ordering::SeqCst);
        self.ledger.bytes_out.fetch_add(len, Ordering::SeqCst);
        self.charge(len as usize);
    }

    pub fn fetch_object_by_key(&self, key: u64) -> Result<Vec<u8>> {
        let bytes = self
            .object_region
            .lock()
            .remove(&key)
            .ok_or(FmError::DeadSlot)?;
        let len = bytes.len();
        self.object_region_bytes
            .fetch_sub(len as u64, Ordering::SeqCst);
        self.ledger.objects_in.fetch_add(1, Ordering::SeqCst);
        self.ledger.bytes_in.fetch_add(len as u64, Ordering::SeqCst);
        self.ledger
            .useful_bytes
            .fetch_add(len as u64, Ordering::SeqCst);
        self.charge(len);
        Ok(bytes.into_vec())
    }

    pub fn peek_object_by_key(&self, key: u64) -> Result<Vec<u8>> {
        self.object_region
            .lock()
            .get(&key)
            .map(|b| b.to_vec())
            .ok_or(FmError::DeadSlot)
    }

    pub fn drop_object_by_key(&self, key: u64) -> Result<()> {
        let bytes = self
            .object_region
            .lock()
            .remove(&key)
            .ok_or(FmError::DeadSlot)?;
        self.object_region_bytes
            .fetch_sub(bytes.len() as u64, Ordering::SeqCst);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> RemoteStore {
        RemoteStore::new(4096, None, LatencyModel::default())
    }

    fn payload(seed: u8) -> Box<[u8]> {
        (0..4096u32)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
            .collect()
    }

    #[test]
    fn page_round_trip_is_identity() {
        let s = store();
        let p = payload(7);
        let slot = s
            .store_page(p.clone(), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        let back = s.load_page(slot).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn load_page_releases_slot() {
        let s = store();
        let slot = s
            .store_page(payload(1), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        s.load_page(slot).unwrap();
        assert!(matches!(s.load_page(slot), Err(FmError::DeadSlot)));
    }

    #[test]
    fn offload_store_records_aligned_addr() {
        let s = store();
        let addr = VirtAddr(0x4400_0000_0000);
        let slot = s.store_page(payload(2), StoreRegion::Offload, addr).unwrap();
        assert_eq!(s.slot_aligned_addr(slot).unwrap(), Some(addr));
        let swap = s
            .store_page(payload(3), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        assert_eq!(s.slot_aligned_addr(swap).unwrap(), None);
    }

    #[test]
    fn store_full_at_zero_capacity() {
        let s = RemoteStore::new(4096, Some(0), LatencyModel::default());
        assert!(matches!(
            s.store_page(payload(0), StoreRegion::Swap, VirtAddr(0x1000)),
            Err(FmError::StoreFull)
        ));
    }

    #[test]
    fn ledger_after_one_round_trip() {
        let s = store();
        let slot = s
            .store_page(payload(4), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        s.load_page(slot).unwrap();
        let l = s.ledger.snapshot();
        assert_eq!(l.bytes_out, 4096);
        assert_eq!(l.bytes_in, 4096);
        assert_eq!(l.pages_in, 1);
        assert_eq!(l.pages_out, 1);
    }

    #[test]
    fn object_fetch_charges_object_size_not_page() {
        let s = store();
        let slot = s
            .store_page(payload(5), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        let before = s.ledger.snapshot();
        let bytes = s.load_object(slot, 0, 64).unwrap();
        assert_eq!(bytes.len(), 64);
        let after = s.ledger.snapshot();
        assert_eq!(after.bytes_in - before.bytes_in, 64);
        assert_eq!(after.useful_bytes - before.useful_bytes, 64);
        assert_eq!(after.objects_in - before.objects_in, 1);
        // Slot still live: a later page-in works.
        s.load_page(slot).unwrap();
    }

    #[test]
    fn object_fetch_bounds_checked() {
        let s = store();
        let slot = s
            .store_page(payload(6), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        assert!(matches!(
            s.load_object(slot, 4090, 16),
            Err(FmError::OutOfRange)
        ));
        assert_eq!(s.load_object(slot, 4090, 6).unwrap().len(), 6);
    }

    #[test]
    fn sub_slice_contents_match() {
        let s = store();
        let p = payload(9);
        let slot = s
            .store_page(p.clone(), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        let got = s.load_object(slot, 100, 64).unwrap();
        assert_eq!(&got[..], &p[100..164]);
    }

    #[test]
    fn amplification_identity_one_object_per_page() {
        // Pages where exactly one 64-byte object is used: paging them in
        // yields bytes_in/useful = page/64.
        let s = store();
        let mut slots = Vec::new();
        for i in 0..8 {
            slots.push(
                s.store_page(payload(i), StoreRegion::Swap, VirtAddr(0x1000))
                    .unwrap(),
            );
        }
        for slot in slots {
            s.load_page(slot).unwrap();
            s.ledger.add_useful(64);
        }
        let l = s.ledger.snapshot();
        assert_eq!(l.bytes_in as f64 / l.useful_bytes as f64, 4096.0 / 64.0);
    }

    #[test]
    fn ledger_conservation() {
        let s = store();
        let mut object_bytes = 0u64;
        let mut page_ins = 0u64;
        let slot_a = s
            .store_page(payload(1), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        let slot_b = s
            .store_page(payload(2), StoreRegion::Swap, VirtAddr(0x2000))
            .unwrap();
        for (off, size) in [(0usize, 16usize), (128, 200), (4000, 96)] {
            s.load_object(slot_a, off, size).unwrap();
            object_bytes += size as u64;
        }
        s.load_page(slot_b).unwrap();
        page_ins += 1;
        let l = s.ledger.snapshot();
        assert_eq!(l.bytes_in, 4096 * page_ins + object_bytes);
    }

    #[test]
    fn simulated_time_advances() {
        let s = store();
        let t0 = s.simulated_time_ns();
        let slot = s
            .store_page(payload(3), StoreRegion::Swap, VirtAddr(0x1000))
            .unwrap();
        s.load_page(slot).unwrap();
        // Two ops at 2000ns each plus 2 * 4096 bytes at 80ps.
        assert_eq!(s.simulated_time_ns() - t0, 2 * (2_000 + 4096 * 80 / 1000));
    }
}
