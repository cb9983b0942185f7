//! Error types shared across the runtime and harness.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FmError {
    #[error("address {0:#x} is not mapped")]
    UnmappedAddress(u64),
    #[error("range crosses a page boundary")]
    CrossesPageBoundary,
    #[error("out of memory: {0}")]
    OutOfMemory(&'static str),
    #[error("no eviction victims: every resident page is pinned or busy")]
    NoVictims,
    #[error("remote store is full")]
    StoreFull,
    #[error("swap slot already released")]
    DeadSlot,
    #[error("range out of bounds")]
    OutOfRange,
    #[error("object already marked dead")]
    DoubleFree,
    #[error("object of {0} bytes does not fit the normal-object path")]
    ObjectTooLarge(usize),
    #[error("metadata field overflow: {0}")]
    FieldOverflow(&'static str),
    #[error("duplicate remotable function name {0:?}")]
    DuplicateName(String),
    #[error("unknown remotable function {0:?}")]
    UnknownFunction(String),
    #[error("segment busy: deref count became nonzero during selection")]
    SkippedBusy,
    #[error("config error: {0}")]
    Config(String),
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FmError>;
