//! Computation offloading over the offload space: remotable-function
//! registry and offload-bit-synchronized remote invocation. Offload-space
//! pages keep their virtual addresses remotely, so a function can run
//! against the slot payload in place; only the result is shipped back.

use std::sync::Arc;

use crate::error::{FmError, Result};
use crate::mem::page::Residency;
use crate::refs::{resolve_main, RefHandle, RefMeta};
use crate::runtime::{RemotableBody, Runtime};

impl Runtime {
    /// Register a remotable function: a pure body over an object's bytes.
    pub fn register_remotable<F>(&self, name: &str, body: F) -> Result<()>
    where
        F: Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    {
        let mut reg = self.remotables.write();
        if reg.contains_key(name) {
            return Err(FmError::DuplicateName(name.to_string()));
        }
        reg.insert(name.to_string(), Arc::new(body) as RemotableBody);
        Ok(())
    }

    /// Invoke a registered function on an offload-space object. While the
    /// offload bit is held the runtime cannot fetch or move the object;
    /// remote objects are evaluated against the slot bytes at their
    /// aligned address and only the result bytes are charged.
    pub fn offload_invoke<H: RefHandle>(&self, handle: &H, fn_name: &str) -> Result<Vec<u8>> {
        let body = self
            .remotables
            .read()
            .get(fn_name)
            .cloned()
            .ok_or_else(|| FmError::UnknownFunction(fn_name.to_string()))?;
        let main = resolve_main(handle.inner())?;
        let mut spins = 0u32;
        loop {
            let word = main.load_word();
            let m = RefMeta::decode(word);
            if m.is_freed() {
                return Err(FmError::UnmappedAddress(0));
            }
            if m.is_moving || m.offload {
                spins += 1;
                if spins < 64 {
                    std::hint::spin_loop();
                } else {
                    std::thread::yield_now();
                }
                continue;
            }
            if main.try_set_offload(word).is_err() {
                continue;
            }
            break;
        }
        // Offload bit held: the address is stable until we clear it.
        let result = self.run_offload_body(&main, &body);
        main.clear_offload();
        result
    }

    fn run_offload_body(
        &self,
        main: &Arc<crate::refs::RefInner>,
        body: &RemotableBody,
    ) -> Result<Vec<u8>> {
        let m = main.load();
        let size = m.size as usize;
        if m.evicted_object() {
            // Object-only baseline: the object sits in the remote object
            // region; run remotely and ship the result.
            let bytes = self.store.peek_object_by_key(main.id)?;
            let out = body(&bytes);
            self.store.charge_offload_result(out.len());
            return Ok(out);
        }
        let page = self.lookup_page(m.vaddr())?;
        let off = page.offset_of(m.vaddr());
        let g = page.inner.lock();
        match g.residency {
            Residency::Local => {
                // Local execution: no remote transfer at all.
                let data = g.data.as_ref().expect("local page has data");
                let bytes = data[off..off + size].to_vec();
                drop(g);
                Ok(body(&bytes))
            }
            Residency::Remote => {
                let slot = g.slot.expect("remote page keeps its slot");
                // Address alignment is what makes in-place execution valid.
                debug_assert_eq!(
                    self.store.slot_aligned_addr(slot)?,
                    Some(page.base),
                    "offload-space slots are address-aligned"
                );
                drop(g);
                let bytes = self.store.peek(slot, off, size)?;
                let out = body(&bytes);
                self.store.charge_offload_result(out.len());
                Ok(out)
            }
        }
    }
}
