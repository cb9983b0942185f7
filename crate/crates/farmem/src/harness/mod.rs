//! Workload harness: drives the runtime with generated or replayed
//! access streams, audits invariants, and produces run reports.

pub mod report;
pub mod trace;
pub mod workload;

pub use report::{emit_report, PhaseReport, PsfSample, ReportFormat, RunReport};
pub use trace::TraceOp;
pub use workload::{object_content, verify_content, Generator, SizeSpec, WorkloadSpec, ZipfIds};

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};

use parking_lot::{Mutex, RwLock};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::{PathPolicy, RuntimeConfig};
use crate::error::{FmError, Result};
use crate::fetch::set_current_worker;
use crate::mem::page::OBJ_HEADER_BYTES;
use crate::refs::UniqueRef;
use crate::runtime::{Runtime, WorkerId};
use crate::store::LedgerSnapshot;

struct ObjSlot {
    handle: Option<UniqueRef>,
    size: u32,
}

struct PhaseMark {
    name: String,
    ledger: LedgerSnapshot,
    ops: u64,
}

struct Engine {
    rt: Arc<Runtime>,
    spec: WorkloadSpec,
    slots: Vec<RwLock<ObjSlot>>,
    versions: Vec<AtomicU64>,
    global_ops: AtomicU64,
    sample_every: u64,
    samples: Mutex<Vec<PsfSample>>,
    phase_name: RwLock<String>,
    phase_marks: Mutex<Vec<PhaseMark>>,
    checksum_mismatches: AtomicU64,
    zipf: Option<ZipfIds>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PhaseKind {
    Build,
    Run,
    Scan(u32),
}

impl PhaseKind {
    fn name(self) -> String {
        match self {
            PhaseKind::Build => "build".into(),
            PhaseKind::Run => "run".into(),
            PhaseKind::Scan(p) => format!("scan_{p}"),
        }
    }
}

/// Execute a workload and return its report. Deterministic for a given
/// (spec, seed) when `worker_count == 1` under the account-only latency
/// model.
pub fn run_workload(spec: &WorkloadSpec) -> Result<RunReport> {
    spec.validate()?;
    if let Generator::Trace(path) = &spec.generator {
        let ops = trace::parse_trace_file(path)?;
        return run_trace(spec, &ops);
    }
    let sizes = spec.sizes();
    let engine = Engine::new(spec.clone(), &sizes)?;
    let plan = phase_plan(&spec.generator);
    let started = std::time::Instant::now();

    let worker_ids: Vec<WorkerId> =
        (0..spec.worker_count).map(|_| engine.rt.register_worker()).collect();
    let barrier = Barrier::new(spec.worker_count);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<FmError>> = Mutex::new(None);

    std::thread::scope(|s| {
        // Background services accompany multi-worker runs; single-worker
        // runs tick them inline for determinism.
        if spec.worker_count > 1 {
            let rt = Arc::clone(&engine.rt);
            let stop = &stop;
            s.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    rt.maybe_evacuate();
                    std::thread::sleep(std::time::Duration::from_micros(200));
                }
            });
            let rt2 = Arc::clone(&engine.rt);
            s.spawn(move || {
                let low = (rt2.pool().capacity_pages() / 32).max(2);
                while !stop.load(Ordering::SeqCst) {
                    if rt2.config().path_policy != PathPolicy::ObjectOnly {
                        let mut budget = 8;
                        while rt2.pool().free_pages() < low && budget > 0 {
                            if rt2.reclaim_one().is_err() {
                                break;
                            }
                            budget -= 1;
                        }
                    }
                    std::thread::sleep(std::time::Duration::from_micros(200));
                }
            });
        }
        let handles: Vec<_> = worker_ids
            .iter()
            .enumerate()
            .map(|(w, wid)| {
                let engine = &engine;
                let barrier = &barrier;
                let failure = &failure;
                let plan = &plan;
                let wid = *wid;
                s.spawn(move || {
                    set_current_worker(wid);
                    for phase in plan {
                        let leader = barrier.wait().is_leader();
                        if leader {
                            engine.begin_phase(phase.name());
                        }
                        barrier.wait();
                        if failure.lock().is_none() {
                            if let Err(e) = engine.run_phase(*phase, w, wid) {
                                let mut f = failure.lock();
                                if f.is_none() {
                                    *f = Some(e);
                                }
                            }
                        }
                        barrier.wait();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker thread panicked");
        }
        stop.store(true, Ordering::SeqCst);
    });
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    engine.finish(started)
}

/// Replay a trace file with default parameters.
pub fn replay_trace(path: &Path) -> Result<RunReport> {
    let spec = WorkloadSpec {
        generator: Generator::Trace(path.to_path_buf()),
        ..WorkloadSpec::default()
    };
    run_workload(&spec)
}

fn phase_plan(generator: &Generator) -> Vec<PhaseKind> {
    match generator {
        Generator::Uniform | Generator::Zipfian { .. } => {
            vec![PhaseKind::Build, PhaseKind::Run]
        }
        Generator::SequentialScan { passes } => {
            let mut v = vec![PhaseKind::Build];
            v.extend((1..=*passes).map(PhaseKind::Scan));
            v
        }
        Generator::TwoPhase { scan_passes } => {
            let mut v = vec![PhaseKind::Build];
            v.extend((1..=*scan_passes).map(PhaseKind::Scan));
            v
        }
        Generator::Trace(_) => unreachable!("trace runs its own loop"),
    }
}

/// Exact page count of the build: per-worker bump-allocation simulation
/// over the allocation order the run will use.
fn working_set_pages(spec: &WorkloadSpec, sizes: &[u32], page_size: usize) -> usize {
    let mut pages = 0usize;
    for w in 0..spec.worker_count {
        let order = spec.allocation_order(w);
        if order.is_empty() {
            continue;
        }
        let mut fill = 0usize;
        let mut worker_pages = 1usize;
        for &id in &order {
            let need = sizes[id] as usize + OBJ_HEADER_BYTES;
            if fill + need > page_size {
                worker_pages += 1;
                fill = 0;
            }
            fill += need;
        }
        pages += worker_pages;
    }
    pages.max(1)
}

impl Engine {
    fn new(spec: WorkloadSpec, sizes: &[u32]) -> Result<Engine> {
        let page_size = 4096;
        let ws_pages = working_set_pages(&spec, sizes, page_size);
        let min_pool = spec.worker_count * 4 + 16;
        let pool = ((spec.local_ratio * ws_pages as f64).ceil() as usize).max(min_pool);
        // At full local ratio nothing may evict: headroom for open TLABs.
        let pool = if spec.local_ratio >= 1.0 { ws_pages + min_pool } else { pool };
        let cfg = RuntimeConfig {
            pool_capacity_pages: pool,
            car_threshold: spec.car_threshold,
            garbage_threshold: spec.garbage_threshold,
            remote_capacity_pages: spec.remote_capacity_pages,
            path_policy: spec.mode,
            latency: spec.latency,
            event_log: spec.event_log,
            ..RuntimeConfig::default()
        };
        let rt = Runtime::new(cfg)?;
        let zipf = match spec.generator {
            Generator::Zipfian { theta, churn_interval } => Some(ZipfIds::new(
                spec.object_count.max(1),
                theta,
                churn_interval,
                spec.seed,
            )?),
            _ => None,
        };
        let total_ops_estimate = estimate_total_ops(&spec);
        let samples_wanted = if spec.sample_count == 0 { 192 } else { spec.sample_count };
        let sample_every = (total_ops_estimate / samples_wanted as u64).max(1);
        let n = spec.object_count;
        Ok(Engine {
            rt,
            slots: (0..n)
                .map(|i| RwLock::new(ObjSlot { handle: None, size: sizes[i] }))
                .collect(),
            versions: (0..n).map(|_| AtomicU64::new(0)).collect(),
            global_ops: AtomicU64::new(0),
            sample_every,
            samples: Mutex::new(Vec::new()),
            phase_name: RwLock::new("build".into()),
            phase_marks: Mutex::new(Vec::new()),
            checksum_mismatches: AtomicU64::new(0),
            zipf,
            spec,
        })
    }

    fn begin_phase(&self, name: String) {
        *self.phase_name.write() = name.clone();
        self.phase_marks.lock().push(PhaseMark {
            name,
            ledger: self.rt.store.ledger.snapshot(),
            ops: self.global_ops.load(Ordering::SeqCst),
        });
    }

    fn run_phase(&self, phase: PhaseKind, w: usize, wid: WorkerId) -> Result<()> {
        match phase {
            PhaseKind::Build => self.run_build(w, wid),
            PhaseKind::Run => self.run_access_ops(w, wid),
            PhaseKind::Scan(_) => self.run_scan(w),
        }
    }

    fn run_build(&self, w: usize, wid: WorkerId) -> Result<()> {
        let order = self.spec.allocation_order(w);
        let two_phase = matches!(self.spec.generator, Generator::TwoPhase { .. });
        let mut rng = self.worker_rng(w, 0xb111d);
        for (i, &id) in order.iter().enumerate() {
            self.alloc_and_init(id, wid)?;
            self.op_tick();
            if two_phase {
                for _ in 0..self.spec.two_phase_mix_gets {
                    let pick = order[rng.gen_range(0..=i)];
                    self.do_get(pick)?;
                    self.op_tick();
                }
            }
        }
        Ok(())
    }

    fn run_access_ops(&self, w: usize, wid: WorkerId) -> Result<()> {
        let _ = wid;
        let total = self.spec.op_count;
        let workers = self.spec.worker_count as u64;
        let mine = total / workers + u64::from((w as u64) < total % workers);
        let mut rng = self.worker_rng(w, 0x0b5);
        let n = self.spec.object_count;
        for _ in 0..mine {
            let op_index = self.op_tick();
            let id = match (&self.spec.generator, &self.zipf) {
                (Generator::Zipfian { .. }, Some(z)) => z.draw(&mut rng, op_index),
                _ => rng.gen_range(0..n),
            };
            if rng.gen::<f64>() < self.spec.get_ratio {
                self.do_get(id)?;
            } else {
                let id = self.shard_set_id(id, w);
                self.do_set(id)?;
            }
        }
        Ok(())
    }

    fn run_scan(&self, w: usize) -> Result<()> {
        let (lo, hi) = self.spec.worker_range(w);
        for id in lo..hi {
            self.do_get(id)?;
            self.op_tick();
        }
        Ok(())
    }

    /// Sets stay single-writer by nudging the id into this worker's
    /// residue class, keeping content verification exact under
    /// concurrency.
    fn shard_set_id(&self, id: usize, w: usize) -> usize {
        let workers = self.spec.worker_count;
        if workers == 1 {
            return id;
        }
        let n = self.spec.object_count;
        let mut s = id - (id % workers) + w;
        while s >= n {
            s = s.saturating_sub(workers);
            if s < workers && s % workers != w {
                // fall back to the first id of this class
                return w.min(n - 1);
            }
        }
        s
    }

    fn alloc_and_init(&self, id: usize, wid: WorkerId) -> Result<()> {
        let size = self.slots[id].read().size as usize;
        let handle = self.rt.allocate(wid, size)?;
        {
            let scope = self.rt.deref(&handle)?;
            scope.write(&object_content(id as u64, 0, size));
        }
        self.slots[id].write().handle = Some(handle);
        Ok(())
    }

    fn do_get(&self, id: usize) -> Result<()> {
        let slot = self.slots[id].read();
        let Some(handle) = slot.handle.as_ref() else { return Ok(()) };
        let scope = self.rt.deref(handle)?;
        let bytes = scope.read();
        drop(scope);
        drop(slot);
        if self.spec.verify {
            match verify_content(id as u64, &bytes) {
                Some(v) if v <= self.versions[id].load(Ordering::SeqCst) => {}
                _ => {
                    self.checksum_mismatches.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
        Ok(())
    }

    fn do_set(&self, id: usize) -> Result<()> {
        let slot = self.slots[id].read();
        let Some(handle) = slot.handle.as_ref() else { return Ok(()) };
        let size = slot.size as usize;
        let v = self.versions[id].fetch_add(1, Ordering::SeqCst) + 1;
        let scope = self.rt.deref(handle)?;
        scope.write(&object_content(id as u64, v, size));
        Ok(())
    }

    fn op_tick(&self) -> u64 {
        let idx = self.global_ops.fetch_add(1, Ordering::SeqCst);
        if idx % self.sample_every == 0 {
            self.sample(idx);
        }
        if self.spec.worker_count == 1 && idx % 1024 == 0 {
            self.rt.maybe_evacuate();
        }
        idx
    }

    fn sample(&self, op_index: u64) {
        let sample = PsfSample {
            op_index,
            phase: self.phase_name.read().clone(),
            paging_fraction: self.rt.psf_paging_fraction(),
            resident_pages: self.rt.pool().resident_pages(),
            ledger: self.rt.store.ledger.snapshot(),
        };
        self.samples.lock().push(sample);
    }

    fn worker_rng(&self, w: usize, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.spec
                .seed
                .wrapping_add((w as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                ^ salt,
        )
    }

    fn finish(self, started: std::time::Instant) -> Result<RunReport> {
        // Final snapshot before any verification sweep traffic.
        let ledger = self.rt.store.ledger.snapshot();
        let final_fraction = self.rt.psf_paging_fraction();
        let flips = self.rt.flip_snapshot();
        let simulated_time_ns = self.rt.store.simulated_time_ns();
        self.rt.quiesce();
        if self.spec.verify {
            for id in 0..self.spec.object_count {
                let slot = self.slots[id].read();
                let Some(handle) = slot.handle.as_ref() else { continue };
                let scope = self.rt.deref(handle)?;
                let bytes = scope.read();
                drop(scope);
                let expect = self.versions[id].load(Ordering::SeqCst);
                if verify_content(id as u64, &bytes) != Some(expect) {
                    self.checksum_mismatches.fetch_add(1, Ordering::SeqCst);
                }
            }
        }

        let working_set = working_set_pages(&self.spec, &self.sizes_now(), 4096);
        let samples = self.samples.into_inner();
        let marks = self.phase_marks.into_inner();
        let total_ops = self.global_ops.load(Ordering::SeqCst);
        let mut phases = Vec::new();
        for (i, mark) in marks.iter().enumerate() {
            let (end_ledger, end_ops) = if i + 1 < marks.len() {
                (marks[i + 1].ledger, marks[i + 1].ops)
            } else {
                (ledger, total_ops)
            };
            let delta = end_ledger.minus(&mark.ledger);
            let phase_samples: Vec<&PsfSample> =
                samples.iter().filter(|s| s.phase == mark.name).collect();
            let mean = if phase_samples.is_empty() {
                0.0
            } else {
                phase_samples.iter().map(|s| s.paging_fraction).sum::<f64>()
                    / phase_samples.len() as f64
            };
            let end_fraction = phase_samples.last().map(|s| s.paging_fraction).unwrap_or(0.0);
            phases.push(PhaseReport {
                name: mark.name.clone(),
                ops: end_ops - mark.ops,
                io_amplification: delta.io_amplification(),
                ledger: delta,
                psf_paging_fraction_end: end_fraction,
                mean_psf_paging_fraction: mean,
            });
        }

        Ok(RunReport {
            mode: self.spec.mode,
            generator: self.spec.generator.label(),
            object_count: self.spec.object_count,
            op_count: total_ops,
            worker_count: self.spec.worker_count,
            local_ratio: self.spec.local_ratio,
            pool_capacity_pages: self.rt.pool().capacity_pages(),
            working_set_pages: working_set,
            seed: self.spec.seed,
            car_threshold: self.spec.car_threshold,
            garbage_threshold: self.spec.garbage_threshold,
            io_amplification: ledger.io_amplification(),
            evict_work_per_evicted_byte: ledger.evict_work_per_byte(),
            ledger,
            flips,
            final_psf_paging_fraction: final_fraction,
            psf_series: samples,
            phases,
            simulated_time_ns,
            wall_time_ms: started.elapsed().as_millis() as u64,
            audit: self.rt.audit.summary(),
            checksum_mismatches: self.checksum_mismatches.load(Ordering::SeqCst),
        })
    }

    fn sizes_now(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.read().size).collect()
    }
}

fn estimate_total_ops(spec: &WorkloadSpec) -> u64 {
    let n = spec.object_count as u64;
    match &spec.generator {
        Generator::Uniform | Generator::Zipfian { .. } => n + spec.op_count,
        Generator::SequentialScan { passes } => n + n * u64::from(*passes),
        Generator::TwoPhase { scan_passes } => {
            n * (1 + u64::from(spec.two_phase_mix_gets)) + n * u64::from(*scan_passes)
        }
        Generator::Trace(_) => spec.op_count.max(1),
    }
}

/// Trace replay: allocate ids 0..=max in order, start cold (everything
/// evicted), then execute the operations on one worker.
fn run_trace(spec: &WorkloadSpec, ops: &[TraceOp]) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let max_id = ops
        .iter()
        .filter_map(|op| match op {
            TraceOp::Get { id } | TraceOp::Set { id, .. } => Some(*id),
            TraceOp::Phase { .. } => None,
        })
        .max();
    let object_count = max_id.map(|m| m as usize + 1).unwrap_or(0);
    let default_size = match spec.object_size {
        SizeSpec::Fixed(v) => v,
        SizeSpec::Uniform(lo, _) => lo,
    };
    let mut sizes = vec![default_size; object_count];
    let mut sized = vec![false; object_count];
    for op in ops {
        if let TraceOp::Set { id, size } = op {
            if !sized[*id as usize] {
                sizes[*id as usize] = *size as u32;
                sized[*id as usize] = true;
            }
        }
    }
    let mut tspec = spec.clone();
    tspec.object_count = object_count;
    tspec.worker_count = 1;
    tspec.object_size = SizeSpec::Fixed(default_size.max(1));
    // verification needs 16-byte objects; traces may use smaller ones
    let verify = tspec.verify && sizes.iter().all(|&s| s >= 16);
    tspec.verify = verify;
    let engine = Engine::new(tspec, &sizes)?;
    for (id, &sz) in sizes.iter().enumerate() {
        engine.slots[id].write().size = sz;
    }
    let wid = engine.rt.register_worker();
    set_current_worker(wid);
    engine.begin_phase("build".into());
    for id in 0..object_count {
        engine.alloc_and_init(id, wid)?;
        engine.op_tick();
    }
    engine.rt.evict_all();
    engine.begin_phase("replay".into());
    for op in ops {
        match op {
            TraceOp::Phase { name } => engine.begin_phase(name.clone()),
            TraceOp::Get { id } => {
                engine.do_get(*id as usize)?;
                engine.op_tick();
            }
            TraceOp::Set { id, size } => {
                let id = *id as usize;
                let cur = engine.slots[id].read().size as usize;
                if *size != cur {
                    // resize: re-home the object
                    let old = engine.slots[id].write().handle.take();
                    if let Some(h) = old {
                        engine.rt.free(h)?;
                    }
                    let handle = engine.rt.allocate(wid, *size)?;
                    let v = engine.versions[id].fetch_add(1, Ordering::SeqCst) + 1;
                    {
                        let scope = engine.rt.deref(&handle)?;
                        scope.write(&object_content(id as u64, v, *size));
                    }
                    let mut slot = engine.slots[id].write();
                    slot.handle = Some(handle);
                    slot.size = *size as u32;
                } else {
                    engine.do_set(id)?;
                }
                engine.op_tick();
            }
        }
    }
    engine.finish(started)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn working_set_estimate_matches_packing() {
        // 56 objects of 64B (72 with header) fill one 4096-byte page.
        let spec = WorkloadSpec {
            object_count: 56,
            ..WorkloadSpec::default()
        };
        let sizes = spec.sizes();
        assert_eq!(working_set_pages(&spec, &sizes, 4096), 1);
        let spec2 = WorkloadSpec {
            object_count: 57,
            ..WorkloadSpec::default()
        };
        assert_eq!(working_set_pages(&spec2, &spec2.sizes(), 4096), 2);
    }
}
