//! The simulated memory model: virtual addresses, card access tables,
//! page descriptors, and the local pool.

pub mod addr;
pub mod card;
pub mod page;
pub mod pool;

pub use addr::{Space, VirtAddr};
pub use card::{compute_car, CardAccessTable};
pub use page::{Generation, ObjState, Page, PathSelector, Residency, OBJ_HEADER_BYTES};
pub use pool::LocalPool;
