//! Remote references: 64-bit packed metadata, unique/shared handles, and
//! the alias chain that reference updating walks after an object moves.
//!
//! The metadata word is the synchronization point for everything that
//! races on one object: `is_moving` arbitrates movers (fetch vs
//! evacuation), `offload` blocks fetches while a remote function runs,
//! and `access` feeds the evacuator's hot/cold segregation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use crate::error::{FmError, Result};
use crate::mem::addr::{VirtAddr, ADDR_LIMIT};

const ADDR_MASK: u64 = ADDR_LIMIT - 1; // bits 0..47
const SIZE_SHIFT: u32 = 47;
const SIZE_MASK: u64 = 0xFFF; // 12 bits
const OFFLOAD_BIT: u64 = 1 << 59;
const RESERVE_SHIFT: u32 = 60;
const RESERVE_MASK: u64 = 0x3; // 2 bits
const ACCESS_BIT: u64 = 1 << 62;
const MOVING_BIT: u64 = 1 << 63;

/// Reserve bit the object-only baseline uses as its present/evicted
/// marker (the paper-layout reserve bits are available to policies).
pub const RESERVE_EVICTED: u8 = 0b01;

/// Decoded reference metadata. Packs to exactly 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefMeta {
    pub is_moving: bool,
    pub access: bool,
    pub reserve: u8,
    pub offload: bool,
    /// Object size in bytes; 1..=4095 for normal objects, 0 is the
    /// huge-object sentinel (real length in the huge registry).
    pub size: u16,
    pub addr: u64,
}

impl RefMeta {
    pub fn new(addr: VirtAddr, size: u16) -> RefMeta {
        RefMeta {
            is_moving: false,
            access: false,
            reserve: 0,
            offload: false,
            size,
            addr: addr.value(),
        }
    }

    pub fn encode(&self) -> Result<u64> {
        if self.addr >= ADDR_LIMIT {
            return Err(FmError::FieldOverflow("addr exceeds 47 bits"));
        }
        if u64::from(self.size) > SIZE_MASK {
            return Err(FmError::FieldOverflow("size exceeds 12 bits"));
        }
        if u64::from(self.reserve) > RESERVE_MASK {
            return Err(FmError::FieldOverflow("reserve exceeds 2 bits"));
        }
        let mut w = self.addr & ADDR_MASK;
        w |= u64::from(self.size) << SIZE_SHIFT;
        if self.offload {
            w |= OFFLOAD_BIT;
        }
        w |= (u64::from(self.reserve) & RESERVE_MASK) << RESERVE_SHIFT;
        if self.access {
            w |= ACCESS_BIT;
        }
        if self.is_moving {
            w |= MOVING_BIT;
        }
        Ok(w)
    }

    pub fn decode(word: u64) -> RefMeta {
        RefMeta {
            is_moving: word & MOVING_BIT != 0,
            access: word & ACCESS_BIT != 0,
            reserve: ((word >> RESERVE_SHIFT) & RESERVE_MASK) as u8,
            offload: word & OFFLOAD_BIT != 0,
            size: ((word >> SIZE_SHIFT) & SIZE_MASK) as u16,
            addr: word & ADDR_MASK,
        }
    }

    pub fn vaddr(&self) -> VirtAddr {
        VirtAddr(self.addr)
    }

    pub fn is_freed(&self) -> bool {
        self.addr == 0
    }

    pub fn evicted_object(&self) -> bool {
        self.reserve & RESERVE_EVICTED != 0
    }
}

/// Next link of the alias chain. The cycle closes back to the main
/// reference through a weak edge.
pub(crate) enum ChainNext {
    None,
    Next(Arc<RefInner>),
    Back(Weak<RefInner>),
}

/// Shared state of one reference (main or alias).
pub struct RefInner {
    pub id: u64,
    pub meta: AtomicU64,
    pub(crate) next: Mutex<ChainNext>,
    /// Weak edge to the main reference; `None` on the main itself.
    pub(crate) main: Option<Weak<RefInner>>,
    /// Serializes chain walks and alias insertion; lives on the main.
    pub(crate) chain_lock: Mutex<()>,
}

impl RefInner {
    pub(crate) fn new_main(id: u64, meta: RefMeta) -> Arc<RefInner> {
        Arc::new(RefInner {
            id,
            meta: AtomicU64::new(meta.encode().expect("valid meta")),
            next: Mutex::new(ChainNext::None),
            main: None,
            chain_lock: Mutex::new(()),
        })
    }

    pub fn load(&self) -> RefMeta {
        RefMeta::decode(self.meta.load(Ordering::SeqCst))
    }

    pub(crate) fn load_word(&self) -> u64 {
        self.meta.load(Ordering::SeqCst)
    }

    /// Try to take the move right: requires the word unchanged since the
    /// caller read it, with `is_moving` and `offload` clear. Returns the
    /// word with `is_moving` set.
    pub(crate) fn try_begin_move(&self, expected: u64) -> std::result::Result<u64, u64> {
        if expected & (MOVING_BIT | OFFLOAD_BIT) != 0 {
            return Err(expected);
        }
        let new = expected | MOVING_BIT;
        match self
            .meta
            .compare_exchange(expected, new, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => Ok(new),
            Err(actual) => Err(actual),
        }
    }

    /// Rewrite the address field, preserving all flags. Used by reference
    /// updating while the caller holds the move right (or for aliases,
    /// which carry no synchronization bits of their own).
    pub(crate) fn store_addr(&self, addr: u64) {
        let mut cur = self.meta.load(Ordering::SeqCst);
        loop {
            let new = (cur & !ADDR_MASK) | (addr & ADDR_MASK);
            match self
                .meta
                .compare_exchange(cur, new, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    pub(crate) fn clear_moving(&self) {
        let prev = self.meta.fetch_and(!MOVING_BIT, Ordering::SeqCst);
        debug_assert!(prev & MOVING_BIT != 0, "clear_moving without move right");
    }

    pub(crate) fn set_access(&self) {
        self.meta.fetch_or(ACCESS_BIT, Ordering::SeqCst);
    }

    pub(crate) fn clear_access(&self) {
        self.meta.fetch_and(!ACCESS_BIT, Ordering::SeqCst);
    }

    /// Try to set the offload bit (remote invocation in progress).
    /// Requires no move in flight.
    pub(crate) fn try_set_offload(&self, expected: u64) -> std::result::Result<u64, u64> {
        if expected & (MOVING_BIT | OFFLOAD_BIT) != 0 {
            return Err(expected);
        }
        let new = expected | OFFLOAD_BIT;
        match self
            .meta
            .compare_exchange(expected, new, Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => Ok(new),
            Err(actual) => Err(actual),
        }
    }

    pub(crate) fn clear_offload(&self) {
        let prev = self.meta.fetch_and(!OFFLOAD_BIT, Ordering::SeqCst);
        debug_assert!(prev & OFFLOAD_BIT != 0);
    }

    pub(crate) fn set_reserve_bits(&self, bits: u8) {
        self.meta
            .fetch_or((u64::from(bits) & RESERVE_MASK) << RESERVE_SHIFT, Ordering::SeqCst);
    }

    pub(crate) fn clear_reserve_bits(&self, bits: u8) {
        self.meta.fetch_and(
            !((u64::from(bits) & RESERVE_MASK) << RESERVE_SHIFT),
            Ordering::SeqCst,
        );
    }

    /// Mark the reference dead: address zeroed, flags cleared.
    pub(crate) fn poison(&self) {
        self.meta.store(0, Ordering::SeqCst);
    }
}

/// Resolve the main reference for a handle's inner. Fails when the object
/// was freed and the main dropped.
pub(crate) fn resolve_main(inner: &Arc<RefInner>) -> Result<Arc<RefInner>> {
    match &inner.main {
        None => Ok(Arc::clone(inner)),
        Some(w) => w.upgrade().ok_or(FmError::UnmappedAddress(0)),
    }
}

/// Append an alias behind the main reference, keeping the chain circular.
pub(crate) fn chain_insert(main: &Arc<RefInner>, alias: &Arc<RefInner>) {
    let _g = main.chain_lock.lock();
    let mut head = main.next.lock();
    let old = std::mem::replace(&mut *head, ChainNext::Next(Arc::clone(alias)));
    *alias.next.lock() = match old {
        ChainNext::None => ChainNext::Back(Arc::downgrade(main)),
        other => other,
    };
}

/// Walk the chain from the main reference, returning every alias. The
/// caller should hold the main's chain lock when racing with updates.
pub(crate) fn chain_aliases(main: &Arc<RefInner>) -> Vec<Arc<RefInner>> {
    let mut out = Vec::new();
    let mut cur = match &*main.next.lock() {
        ChainNext::Next(a) => Arc::clone(a),
        _ => return out,
    };
    loop {
        out.push(Arc::clone(&cur));
        let next = match &*cur.next.lock() {
            ChainNext::Next(a) => Arc::clone(a),
            ChainNext::Back(back) => {
                debug_assert!(
                    back.upgrade().map(|m| m.id == main.id).unwrap_or(true),
                    "chain cycle must close at the main reference"
                );
                break;
            }
            ChainNext::None => break,
        };
        cur = next;
    }
    out
}

/// Rewrite the main reference and every alias to a moved object's new
/// address, then release the move right. The caller must have won the
/// `is_moving` compare-and-set; losers wait and re-read instead of
/// fetching again.
pub(crate) fn update_references(main: &Arc<RefInner>, new_addr: VirtAddr) {
    debug_assert!(main.load().is_moving);
    main.store_addr(new_addr.value());
    {
        let _g = main.chain_lock.lock();
        for alias in chain_aliases(main) {
            alias.store_addr(new_addr.value());
        }
    }
    main.clear_moving();
}

/// Handle to an object with single-reference semantics.
#[derive(Debug)]
pub struct UniqueRef {
    pub(crate) inner: Arc<RefInner>,
}

/// Handle to an object that may have chained aliases.
#[derive(Debug)]
pub struct SharedRef {
    pub(crate) inner: Arc<RefInner>,
}

impl std::fmt::Debug for RefInner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RefInner")
            .field("id", &self.id)
            .field("meta", &self.load())
            .finish()
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for super::UniqueRef {}
    impl Sealed for super::SharedRef {}
}

/// Anything the barrier can dereference.
pub trait RefHandle: sealed::Sealed {
    fn inner(&self) -> &Arc<RefInner>;
    fn meta(&self) -> RefMeta {
        self.inner().load()
    }
    fn id(&self) -> u64 {
        self.inner().id
    }
}

impl RefHandle for UniqueRef {
    fn inner(&self) -> &Arc<RefInner> {
        &self.inner
    }
}

impl RefHandle for SharedRef {
    fn inner(&self) -> &Arc<RefInner> {
        &self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fields_encode_to_zero_word() {
        let m = RefMeta {
            is_moving: false,
            access: false,
            reserve: 0,
            offload: false,
            size: 0,
            addr: 0,
        };
        assert_eq!(m.encode().unwrap(), 0);
    }

    #[test]
    fn boundary_fields_round_trip() {
        let m = RefMeta {
            is_moving: true,
            access: true,
            reserve: 3,
            offload: true,
            size: 4095,
            addr: ADDR_LIMIT - 1,
        };
        let w = m.encode().unwrap();
        assert_eq!(RefMeta::decode(w), m);
    }

    #[test]
    fn size_field_overflows_at_4096() {
        let mut m = RefMeta::new(VirtAddr(0x1000), 0);
        m.size = 4096;
        assert!(matches!(m.encode(), Err(FmError::FieldOverflow(_))));
    }

    #[test]
    fn addr_field_overflows_past_47_bits() {
        let m = RefMeta {
            addr: ADDR_LIMIT,
            ..RefMeta::new(VirtAddr(0), 1)
        };
        assert!(matches!(m.encode(), Err(FmError::FieldOverflow(_))));
    }

    #[test]
    fn move_right_is_exclusive() {
        let r = RefInner::new_main(1, RefMeta::new(VirtAddr(0x1000), 64));
        let w = r.load_word();
        let held = r.try_begin_move(w).unwrap();
        assert!(r.try_begin_move(held).is_err());
        assert!(r.try_begin_move(w).is_err());
        r.clear_moving();
        assert!(!r.load().is_moving);
    }

    #[test]
    fn offload_bit_blocks_move() {
        let r = RefInner::new_main(2, RefMeta::new(VirtAddr(0x1000), 64));
        let w = r.try_set_offload(r.load_word()).unwrap();
        assert!(r.try_begin_move(w).is_err());
        r.clear_offload();
        assert!(r.try_begin_move(r.load_word()).is_ok());
    }

    #[test]
    fn unique_move_rewrites_one_meta() {
        let r = RefInner::new_main(3, RefMeta::new(VirtAddr(0x1000), 64));
        r.try_begin_move(r.load_word()).unwrap();
        update_references(&r, VirtAddr(0x2000));
        let m = r.load();
        assert_eq!(m.addr, 0x2000);
        assert!(!m.is_moving);
    }

    #[test]
    fn chain_walk_updates_every_alias() {
        let main = RefInner::new_main(4, RefMeta::new(VirtAddr(0x1000), 64));
        let mut aliases = Vec::new();
        for i in 0..3 {
            let a = Arc::new(RefInner {
                id: 10 + i,
                meta: AtomicU64::new(main.load_word()),
                next: Mutex::new(ChainNext::None),
                main: Some(Arc::downgrade(&main)),
                chain_lock: Mutex::new(()),
            });
            chain_insert(&main, &a);
            aliases.push(a);
        }
        assert_eq!(chain_aliases(&main).len(), 3);
        main.try_begin_move(main.load_word()).unwrap();
        update_references(&main, VirtAddr(0x3000));
        for a in &aliases {
            assert_eq!(a.load().addr, 0x3000);
        }
        // Chain stays circularly reachable: every alias resolves main.
        for a in &aliases {
            assert_eq!(resolve_main(a).unwrap().id, main.id);
        }
    }
}
