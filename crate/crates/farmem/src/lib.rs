//! A user-space far-memory runtime and desk-scale simulator with a
//! hybrid data plane.
//!
//! Object-granularity fetching and page-granularity fetching coexist at
//! ingress. Every page carries a card access table (one bit per 16-byte
//! card, set by the read barrier); at eviction the card access rate
//! decides the page's 1-bit path selector, so pages with good locality
//! are paged in whole while scattered data is fetched object by object
//! and re-homed into contiguous local space. Eviction is always page
//! granular; a concurrent evacuator compacts fragmented segments and
//! segregates recently-accessed objects into hot pages.
//!
//! The [`harness`] module drives workloads against the runtime in hybrid
//! or single-path baseline modes and reports transfer ledgers, I/O
//! amplification, path-selector time series, and eviction economy.
//!
//! Quick tour:
//!
//! ```
//! use farmem::{Runtime, RuntimeConfig};
//!
//! let rt = Runtime::new(RuntimeConfig::default()).unwrap();
//! let worker = rt.register_worker();
//! let obj = rt.allocate(worker, 64).unwrap();
//! {
//!     let scope = rt.deref(&obj).unwrap();
//!     scope.write(&[7u8; 64]);
//!     assert_eq!(scope.read()[0], 7);
//! } // post-scope barrier releases the pin
//! rt.free(obj).unwrap();
//! ```

pub mod audit;
pub mod baseline;
mod barrier;
pub mod config;
pub mod error;
pub mod evac;
mod fetch;
pub mod harness;
pub mod mem;
mod offload;
pub mod paging;
pub mod refs;
mod runtime;
pub mod store;

pub use barrier::DerefScope;
pub use config::{PathPolicy, RuntimeConfig};
pub use error::{FmError, Result};
pub use evac::EvacReport;
pub use fetch::set_current_worker;
pub use mem::{CardAccessTable, LocalPool, Page, PathSelector, Residency, Space, VirtAddr};
pub use refs::{RefHandle, RefMeta, SharedRef, UniqueRef};
pub use runtime::{FlipSnapshot, Runtime, WorkerId, MAX_NORMAL_OBJECT};
pub use store::{LatencyMode, LatencyModel, LedgerSnapshot, RemoteStore, SlotId, TransferLedger};
