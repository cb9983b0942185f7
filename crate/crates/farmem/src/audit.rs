//! Invariant auditing: cheap always-on violation counters, plus an
//! optional event log and an offline auditor that replays it.
//!
//! The three synchronization invariants checked here:
//!   1. all fetches of data on a page within one remote epoch use the
//!      single path named by its selector at epoch start;
//!   2. no page-out of a page whose deref count was nonzero at selection;
//!   3. no evacuation move overlapping an active dereference scope.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::mem::page::{TRANSITION_EVACUATED, TRANSITION_FREED, TRANSITION_PAGE_OUT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchPath {
    Runtime,
    Paging,
}

/// One entry of the optional event log. Pages are identified by base
/// address; `epoch` is the page's residency epoch at the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    ScopeGrant { page: u64, epoch: u64 },
    ScopeExit { page: u64, epoch: u64 },
    PageOut { page: u64, epoch: u64, deref_count: u32, paging_psf: bool },
    PageIn { page: u64, epoch: u64 },
    Fetch { page: u64, epoch: u64, runtime_path: bool },
    EvacMove { page: u64, epoch: u64 },
    SegmentFreed { page: u64, epoch: u64 },
    PsfFlip { page: u64, forced: bool },
}

#[derive(Default)]
pub struct AuditCounters {
    /// Invariant #1: mixed ingress paths within one remote epoch.
    pub path_mix: AtomicU64,
    /// Invariant #2: page-out observed a nonzero deref count.
    pub pageout_pinned: AtomicU64,
    /// Invariant #3: evacuation overlapped an active scope.
    pub evac_pinned: AtomicU64,
    /// A page transitioned under an active scope (caught at scope exit).
    pub epoch_torn: AtomicU64,
    /// A runtime-fetched object's stale remote copy was read again.
    pub stale_remote_read: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub path_mix: u64,
    pub pageout_pinned: u64,
    pub evac_pinned: u64,
    pub epoch_torn: u64,
    pub stale_remote_read: u64,
}

impl AuditSummary {
    pub fn total(&self) -> u64 {
        self.path_mix + self.pageout_pinned + self.evac_pinned + self.epoch_torn
            + self.stale_remote_read
    }
}

pub struct AuditState {
    pub counters: AuditCounters,
    log: Option<Mutex<Vec<Event>>>,
}

impl AuditState {
    pub fn new(event_log: bool) -> Self {
        AuditState {
            counters: AuditCounters::default(),
            log: event_log.then(|| Mutex::new(Vec::new())),
        }
    }

    #[inline]
    pub fn logging(&self) -> bool {
        self.log.is_some()
    }

    /// Record an event. Call sites hold the page lock of the page named
    /// in the event, so the log order is consistent per page.
    #[inline]
    pub fn record(&self, ev: Event) {
        if let Some(log) = &self.log {
            log.lock().push(ev);
        }
    }

    pub fn take_events(&self) -> Vec<Event> {
        self.log
            .as_ref()
            .map(|l| std::mem::take(&mut *l.lock()))
            .unwrap_or_default()
    }

    pub fn summary(&self) -> AuditSummary {
        AuditSummary {
            path_mix: self.counters.path_mix.load(Ordering::SeqCst),
            pageout_pinned: self.counters.pageout_pinned.load(Ordering::SeqCst),
            evac_pinned: self.counters.evac_pinned.load(Ordering::SeqCst),
            epoch_torn: self.counters.epoch_torn.load(Ordering::SeqCst),
            stale_remote_read: self.counters.stale_remote_read.load(Ordering::SeqCst),
        }
    }

    pub(crate) fn note_epoch_torn(&self, last_transition: u8) {
        self.counters.epoch_torn.fetch_add(1, Ordering::SeqCst);
        match last_transition {
            TRANSITION_PAGE_OUT => {
                self.counters.pageout_pinned.fetch_add(1, Ordering::SeqCst);
            }
            TRANSITION_EVACUATED | TRANSITION_FREED => {
                self.counters.evac_pinned.fetch_add(1, Ordering::SeqCst);
            }
            _ => {}
        }
    }
}

/// Violations found by replaying an event log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogViolations {
    pub pageout_under_scope: usize,
    pub evac_under_scope: usize,
    pub mixed_paths: usize,
    pub unbalanced_scopes: usize,
}

impl LogViolations {
    pub fn total(&self) -> usize {
        self.pageout_under_scope + self.evac_under_scope + self.mixed_paths
            + self.unbalanced_scopes
    }
}

/// Replay an event log and check the invariants independently of the
/// inline counters.
pub fn audit_events(events: &[Event]) -> LogViolations {
    let mut v = LogViolations::default();
    let mut active: HashMap<u64, i64> = HashMap::new();
    // (page, epoch) -> runtime_path of first fetch
    let mut epoch_paths: HashMap<(u64, u64), bool> = HashMap::new();

    for ev in events {
        match *ev {
            Event::ScopeGrant { page, .. } => {
                *active.entry(page).or_insert(0) += 1;
            }
            Event::ScopeExit { page, .. } => {
                let c = active.entry(page).or_insert(0);
                *c -= 1;
                if *c < 0 {
                    v.unbalanced_scopes += 1;
                }
            }
            Event::PageOut { page, deref_count, .. } => {
                if deref_count > 0 || active.get(&page).copied().unwrap_or(0) > 0 {
                    v.pageout_under_scope += 1;
                }
            }
            Event::EvacMove { page, .. } | Event::SegmentFreed { page, .. } => {
                if active.get(&page).copied().unwrap_or(0) > 0 {
                    v.evac_under_scope += 1;
                }
            }
            Event::Fetch { page, epoch, runtime_path } => {
                match epoch_paths.entry((page, epoch)) {
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(runtime_path);
                    }
                    std::collections::hash_map::Entry::Occupied(e) => {
                        if *e.get() != runtime_path {
                            v.mixed_paths += 1;
                        }
                    }
                }
            }
            Event::PageIn { .. } | Event::PsfFlip { .. } => {}
        }
    }
    for (_, c) in active {
        if c != 0 {
            v.unbalanced_scopes += 1;
        }
    }
    v
}
