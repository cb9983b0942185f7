//! Object-only baseline machinery: a promote-on-deref LRU list and
//! object-granularity eviction, the in-simulator stand-in for an
//! object-fetching runtime with object-level reclamation. Every list
//! touch charges one eviction work unit, which is what makes the
//! page-vs-object eviction-cost comparison computable.

use std::collections::HashMap;
use std::sync::{Arc, Weak};

use crate::error::{FmError, Result};
use crate::mem::page::ObjState;
use crate::refs::{RefInner, RefMeta, RESERVE_EVICTED};
use crate::runtime::Runtime;

const NIL: u32 = u32::MAX;

struct Node {
    prev: u32,
    next: u32,
    key: u64,
    inner: Weak<RefInner>,
    size: u32,
}

/// Intrusive-style doubly linked LRU over an arena. Head = most recent.
pub struct ObjectLru {
    nodes: Vec<Node>,
    free: Vec<u32>,
    map: HashMap<u64, u32>,
    head: u32,
    tail: u32,
}

impl ObjectLru {
    pub fn new() -> Self {
        ObjectLru {
            nodes: Vec::new(),
            free: Vec::new(),
            map: HashMap::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn unlink(&mut self, idx: u32) {
        let (prev, next) = {
            let n = &self.nodes[idx as usize];
            (n.prev, n.next)
        };
        if prev != NIL {
            self.nodes[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.nodes[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn link_head(&mut self, idx: u32) {
        self.nodes[idx as usize].prev = NIL;
        self.nodes[idx as usize].next = self.head;
        if self.head != NIL {
            self.nodes[self.head as usize].prev = idx;
        }
        self.head = idx;
        if self.tail == NIL {
            self.tail = idx;
        }
    }

    pub fn insert(&mut self, main: &Arc<RefInner>, size: usize) {
        if let Some(&idx) = self.map.get(&main.id) {
            self.unlink(idx);
            self.link_head(idx);
            return;
        }
        let idx = if let Some(f) = self.free.pop() {
            self.nodes[f as usize] = Node {
                prev: NIL,
                next: NIL,
                key: main.id,
                inner: Arc::downgrade(main),
                size: size as u32,
            };
            f
        } else {
            self.nodes.push(Node {
                prev: NIL,
                next: NIL,
                key: main.id,
                inner: Arc::downgrade(main),
                size: size as u32,
            });
            (self.nodes.len() - 1) as u32
        };
        self.map.insert(main.id, idx);
        self.link_head(idx);
    }

    /// Promote on dereference.
    pub fn touch(&mut self, key: u64) {
        if let Some(&idx) = self.map.get(&key) {
            self.unlink(idx);
            self.link_head(idx);
        }
    }

    pub fn remove(&mut self, key: u64) {
        if let Some(idx) = self.map.remove(&key) {
            self.unlink(idx);
            self.free.push(idx);
        }
    }

    /// Detach the coldest entry.
    pub fn pop_tail(&mut self) -> Option<(u64, Weak<RefInner>, u32)> {
        if self.tail == NIL {
            return None;
        }
        let idx = self.tail;
        self.unlink(idx);
        let node = &self.nodes[idx as usize];
        let out = (node.key, node.inner.clone(), node.size);
        self.map.remove(&out.0);
        self.free.push(idx);
        Some(out)
    }

    /// Put a busy entry back at the head (it was just seen).
    pub fn reinsert_head(&mut self, key: u64, inner: Weak<RefInner>, size: u32) {
        let idx = if let Some(f) = self.free.pop() {
            self.nodes[f as usize] = Node { prev: NIL, next: NIL, key, inner, size };
            f
        } else {
            self.nodes.push(Node { prev: NIL, next: NIL, key, inner, size });
            (self.nodes.len() - 1) as u32
        };
        self.map.insert(key, idx);
        self.link_head(idx);
    }
}

impl Default for ObjectLru {
    fn default() -> Self {
        Self::new()
    }
}

impl Runtime {
    /// Evict the coldest unpinned object to the remote object region.
    /// Returns the evicted byte count (0 when only busy candidates were
    /// seen this round).
    pub(crate) fn evict_one_object(&self) -> Result<usize> {
        for _ in 0..64 {
            let Some((key, weak, size)) = self.lru.lock().pop_tail() else {
                return Err(FmError::NoVictims);
            };
            self.store.ledger.charge_evict_work(1); // list pop
            let Some(main) = weak.upgrade() else { continue };
            let word = main.load_word();
            let m = RefMeta::decode(word);
            if m.is_freed() || m.evicted_object() || m.size == 0 {
                continue;
            }
            let Ok(page) = self.lookup_page(m.vaddr()) else { continue };
            if main.try_begin_move(word).is_err() {
                self.lru.lock().reinsert_head(key, weak, size);
                self.store.ledger.charge_evict_work(1);
                continue;
            }
            // An active scope on the page blocks object eviction, same
            // pin discipline as everywhere else.
            if page.deref_count() > 0 {
                main.clear_moving();
                self.lru.lock().reinsert_head(key, weak, size);
                self.store.ledger.charge_evict_work(1);
                continue;
            }
            let off = page.offset_of(m.vaddr());
            let bytes = {
                let g = page.inner.lock();
                let data = g.data.as_ref().expect("object-only pages stay local");
                data[off..off + size as usize].to_vec()
            };
            self.store.evict_object(key, bytes);
            {
                let mut g = page.inner.lock();
                if let Some(seg) = g.seg.as_mut() {
                    if let Some(idx) = seg.find_record(off as u32) {
                        let rec = &mut seg.records[idx];
                        if rec.state == ObjState::Live {
                            rec.state = ObjState::Dead;
                            rec.main = None;
                            seg.live_bytes -= rec.size as usize
                                + crate::mem::page::OBJ_HEADER_BYTES;
                        }
                    }
                }
            }
            main.set_reserve_bits(RESERVE_EVICTED);
            main.clear_moving();
            // LRU-ordered deaths often empty whole segments.
            self.try_free_dead_segment(&page);
            return Ok(size as usize);
        }
        Ok(0)
    }

    /// Object-only reclamation: evict cold objects until a page frees,
    /// falling back to compaction when deaths are too scattered.
    pub(crate) fn object_reclaim_step(&self) -> Result<()> {
        let before_free = self.pool.free_pages();
        let mut evicted = 0usize;
        for _ in 0..512 {
            if self.pool.free_pages() > before_free {
                return Ok(());
            }
            if evicted >= self.cfg.page_size * 4 {
                break;
            }
            match self.evict_one_object() {
                Ok(bytes) => evicted += bytes.max(1),
                Err(FmError::NoVictims) => break,
                Err(e) => return Err(e),
            }
        }
        if self.pool.free_pages() > before_free {
            return Ok(());
        }
        let report = self.evacuation_cycle(self.cfg.garbage_threshold);
        if self.pool.free_pages() > before_free || report.segments_freed > 0 {
            return Ok(());
        }
        if evicted == 0 {
            Err(FmError::NoVictims)
        } else {
            Ok(())
        }
    }

    /// Number of objects currently tracked by the baseline LRU.
    pub fn lru_len(&self) -> usize {
        self.lru.lock().len()
    }
}
