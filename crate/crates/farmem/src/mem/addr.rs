//! Simulated 47-bit virtual addresses and the heap's address regions.

use crate::error::{FmError, Result};
use serde::{Deserialize, Serialize};

/// Width of the address field carried in reference metadata.
pub const ADDR_BITS: u32 = 47;
/// Highest representable address plus one.
pub const ADDR_LIMIT: u64 = 1 << ADDR_BITS;

/// Base of the normal-object space.
pub const NORMAL_BASE: u64 = 1 << 32;
/// Base of the huge-object space.
pub const HUGE_BASE: u64 = 1 << 42;
/// Base of the offload space.
pub const OFFLOAD_BASE: u64 = 1 << 44;
/// Base of the metadata space (card tables, deref counters). The simulator
/// keeps metadata in host structures; the region exists for accounting.
pub const METADATA_BASE: u64 = 1 << 46;

/// A virtual address in the simulated heap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub fn new(value: u64) -> Result<Self> {
        if value >= ADDR_LIMIT {
            return Err(FmError::FieldOverflow("addr exceeds 47 bits"));
        }
        Ok(VirtAddr(value))
    }

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn page(self, page_shift: u32) -> u64 {
        self.0 >> page_shift
    }

    #[inline]
    pub fn page_base(self, page_shift: u32) -> VirtAddr {
        VirtAddr((self.0 >> page_shift) << page_shift)
    }

    #[inline]
    pub fn offset_in_page(self, page_shift: u32) -> usize {
        (self.0 & ((1u64 << page_shift) - 1)) as usize
    }

    #[inline]
    pub fn add(self, bytes: u64) -> VirtAddr {
        VirtAddr(self.0 + bytes)
    }

    /// Which heap space the address falls in.
    pub fn space(self) -> Space {
        match self.0 {
            v if v >= METADATA_BASE => Space::Metadata,
            v if v >= OFFLOAD_BASE => Space::Offload,
            v if v >= HUGE_BASE => Space::Huge,
            _ => Space::Normal,
        }
    }
}

impl std::fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Heap spaces. Normal objects are log-allocated; huge objects are
/// paging-only; offload objects are object-in/page-out; metadata is
/// runtime-internal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Normal,
    Huge,
    Offload,
    Metadata,
}
