//! Workload specification and access-stream generators.

use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PathPolicy;
use crate::error::{FmError, Result};
use crate::store::LatencyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    /// Uniform-random ids, no reuse structure.
    Uniform,
    /// Zipfian ids through a seeded permutation; the permutation rotates
    /// every `churn_interval` ops so the hot set drifts.
    Zipfian { theta: f64, churn_interval: u64 },
    /// Each worker scans its id range in order, `passes` times.
    SequentialScan { passes: u32 },
    /// Random-order inserts with interleaved random gets, then
    /// sequential scan passes.
    TwoPhase { scan_passes: u32 },
    /// Replay a trace file.
    Trace(PathBuf),
}

impl Generator {
    pub fn label(&self) -> String {
        match self {
            Generator::Uniform => "uniform".into(),
            Generator::Zipfian { theta, churn_interval } => {
                format!("zipfian(theta={theta},churn={churn_interval})")
            }
            Generator::SequentialScan { passes } => format!("sequential_scan(passes={passes})"),
            Generator::TwoPhase { scan_passes } => format!("two_phase(scans={scan_passes})"),
            Generator::Trace(p) => format!("trace({})", p.display()),
        }
    }

    /// Parse CLI forms: `uniform`, `zipfian:0.99:100000`, `seq_scan:3`,
    /// `two_phase:3`, `trace:/path/to/file`.
    pub fn parse(s: &str) -> Result<Generator> {
        let mut parts = s.splitn(3, ':');
        let kind = parts.next().unwrap();
        match kind {
            "uniform" => Ok(Generator::Uniform),
            "zipfian" => {
                let theta: f64 = parts
                    .next()
                    .unwrap_or("0.99")
                    .parse()
                    .map_err(|_| FmError::Config("bad zipfian theta".into()))?;
                let churn: u64 = parts
                    .next()
                    .unwrap_or("0")
                    .parse()
                    .map_err(|_| FmError::Config("bad churn interval".into()))?;
                Ok(Generator::Zipfian { theta, churn_interval: churn })
            }
            "seq_scan" | "sequential_scan" => {
                let passes: u32 = parts
                    .next()
                    .unwrap_or("2")
                    .parse()
                    .map_err(|_| FmError::Config("bad scan pass count".into()))?;
                Ok(Generator::SequentialScan { passes })
            }
            "two_phase" => {
                let passes: u32 = parts
                    .next()
                    .unwrap_or("3")
                    .parse()
                    .map_err(|_| FmError::Config("bad scan pass count".into()))?;
                Ok(Generator::TwoPhase { scan_passes: passes })
            }
            "trace" => {
                let path = parts
                    .next()
                    .ok_or_else(|| FmError::Config("trace generator needs a path".into()))?;
                Ok(Generator::Trace(PathBuf::from(path)))
            }
            other => Err(FmError::Config(format!("unknown workload {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeSpec {
    Fixed(u32),
    /// Uniform in [min, max], assigned per object id from the seed.
    Uniform(u32, u32),
}

impl SizeSpec {
    /// Parse `64` or `32:128`.
    pub fn parse(s: &str) -> Result<SizeSpec> {
        if let Some((a, b)) = s.split_once(':') {
            let lo: u32 = a.parse().map_err(|_| FmError::Config("bad size".into()))?;
            let hi: u32 = b.parse().map_err(|_| FmError::Config("bad size".into()))?;
            if lo == 0 || hi < lo {
                return Err(FmError::Config("bad size range".into()));
            }
            Ok(SizeSpec::Uniform(lo, hi))
        } else {
            let v: u32 = s.parse().map_err(|_| FmError::Config("bad size".into()))?;
            if v == 0 {
                return Err(FmError::Config("size must be positive".into()));
            }
            Ok(SizeSpec::Fixed(v))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub generator: Generator,
    pub object_count: usize,
    pub object_size: SizeSpec,
    pub op_count: u64,
    pub worker_count: usize,
    /// Fraction of the working set that fits in local memory.
    pub local_ratio: f64,
    pub mode: PathPolicy,
    pub seed: u64,
    pub car_threshold: f64,
    pub garbage_threshold: f64,
    pub latency: LatencyModel,
    /// Fraction of access ops that are gets (rest are sets).
    pub get_ratio: f64,
    pub remote_capacity_pages: Option<usize>,
    /// Path-selector samples per run (0 = default).
    pub sample_count: usize,
    /// Verify object contents against the deterministic oracle.
    pub verify: bool,
    pub event_log: bool,
    /// Random gets interleaved per insert in the two-phase build.
    pub two_phase_mix_gets: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            generator: Generator::Uniform,
            object_count: 10_000,
            object_size: SizeSpec::Fixed(64),
            op_count: 100_000,
            worker_count: 1,
            local_ratio: 0.25,
            mode: PathPolicy::Hybrid,
            seed: 42,
            car_threshold: 0.80,
            garbage_threshold: 0.5,
            latency: LatencyModel::default(),
            get_ratio: 0.875,
            remote_capacity_pages: None,
            sample_count: 0,
            verify: true,
            event_log: false,
            two_phase_mix_gets: 2,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 && !matches!(self.generator, Generator::Trace(_)) {
            return Err(FmError::Config("object_count must be positive".into()));
        }
        if self.worker_count == 0 {
            return Err(FmError::Config("worker_count must be positive".into()));
        }
        if !(self.local_ratio > 0.0 && self.local_ratio <= 1.0) {
            return Err(FmError::Config(format!(
                "local_ratio {} must lie in (0, 1]",
                self.local_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.get_ratio) {
            return Err(FmError::Config("get_ratio must lie in [0,1]".into()));
        }
        match self.object_size {
            SizeSpec::Fixed(v) if v == 0 => {
                return Err(FmError::Config("object size must be positive".into()))
            }
            SizeSpec::Uniform(lo, hi) if lo == 0 || hi < lo => {
                return Err(FmError::Config("bad object size range".into()))
            }
            _ => {}
        }
        if self.verify && self.min_object_size() < 16 {
            return Err(FmError::Config(
                "content verification needs objects of at least 16 bytes".into(),
            ));
        }
        match &self.generator {
            Generator::Zipfian { theta, .. } if *theta <= 0.0 => {
                return Err(FmError::Config("zipfian theta must be positive".into()))
            }
            Generator::SequentialScan { passes } if *passes == 0 => {
                return Err(FmError::Config("scan passes must be positive".into()))
            }
            Generator::TwoPhase { scan_passes } if *scan_passes == 0 => {
                return Err(FmError::Config("scan passes must be positive".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn min_object_size(&self) -> u32 {
        match self.object_size {
            SizeSpec::Fixed(v) => v,
            SizeSpec::Uniform(lo, _) => lo,
        }
    }

    /// Deterministic per-object sizes.
    pub fn sizes(&self) -> Vec<u32> {
        match self.object_size {
            SizeSpec::Fixed(v) => vec![v; self.object_count],
            SizeSpec::Uniform(lo, hi) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5123_9ab4_77ef_0111);
                (0..self.object_count).map(|_| rng.gen_range(lo..=hi)).collect()
            }
        }
    }

    /// Ids [lo, hi) owned by a worker.
    pub fn worker_range(&self, worker: usize) -> (usize, usize) {
        let n = self.object_count;
        let w = self.worker_count;
        let lo = n * worker / w;
        let hi = n * (worker + 1) / w;
        (lo, hi)
    }

    /// The order in which a worker allocates its ids during the build.
    pub fn allocation_order(&self, worker: usize) -> Vec<usize> {
        let (lo, hi) = self.worker_range(worker);
        let mut ids: Vec<usize> = (lo..hi).collect();
        if matches!(self.generator, Generator::TwoPhase { .. }) {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ (worker as u64).wrapping_mul(0x9E37_79B9));
            ids.shuffle(&mut rng);
        }
        ids
    }
}

/// Deterministic object content: id, version, then a keyed byte stream.
/// The embedded version lets concurrent reader checks stay exact.
pub fn object_content(id: u64, version: u64, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    let idb = id.to_le_bytes();
    let vb = version.to_le_bytes();
    let head = size.min(8);
    out[..head].copy_from_slice(&idb[..head]);
    if size > 8 {
        let vh = (size - 8).min(8);
        out[8..8 + vh].copy_from_slice(&vb[..vh]);
    }
    let mut state = id
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(version.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        | 1;
    let mut i = 16;
    while i < size {
        state = splitmix64(&mut state);
        let chunk = state.to_le_bytes();
        let n = (size - i).min(8);
        out[i..i + n].copy_from_slice(&chunk[..n]);
        i += n;
    }
    out
}

/// Check bytes against the oracle; returns the embedded version when the
/// content is self-consistent.
pub fn verify_content(id: u64, bytes: &[u8]) -> Option<u64> {
    if bytes.len() < 16 {
        return None;
    }
    let got_id = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if got_id != id {
        return None;
    }
    let version = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expect = object_content(id, version, bytes.len());
    (expect == bytes).then_some(version)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Zipfian rank sampler over a rotating permutation.
pub struct ZipfIds {
    dist: rand_distr::Zipf<f64>,
    perm: std::sync::Arc<Vec<u32>>,
    n: usize,
    stride: u64,
    churn_interval: u64,
}

impl ZipfIds {
    pub fn new(n: usize, theta: f64, churn_interval: u64, seed: u64) -> Result<Self> {
        let dist = rand_distr::Zipf::new(n as u64, theta)
            .map_err(|e| FmError::Config(format!("zipf: {e}")))?;
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee_1234_5678);
        perm.shuffle(&mut rng);
        Ok(ZipfIds {
            dist,
            perm: std::sync::Arc::new(perm),
            n,
            stride: (n as u64 / 16).max(1),
            churn_interval,
        })
    }

    /// Draw an id for the access at global index `op_index`.
    pub fn draw(&self, rng: &mut impl Rng, op_index: u64) -> usize {
        let rank = (self.dist.sample(rng) as usize - 1).min(self.n - 1);
        let rot = if self.churn_interval == 0 {
            0
        } else {
            ((op_index / self.churn_interval) * self.stride) % self.n as u64
        };
        self.perm[(rank + rot as usize) % self.n] as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_parse_round_trip() {
        assert_eq!(Generator::parse("uniform").unwrap(), Generator::Uniform);
        assert_eq!(
            Generator::parse("zipfian:0.9:5000").unwrap(),
            Generator::Zipfian { theta: 0.9, churn_interval: 5000 }
        );
        assert_eq!(
            Generator::parse("seq_scan:4").unwrap(),
            Generator::SequentialScan { passes: 4 }
        );
        assert!(Generator::parse("nope").is_err());
    }

    #[test]
    fn content_oracle_round_trips() {
        for (id, v, size) in [(0u64, 0u64, 16usize), (5, 3, 64), (123, 9, 311)] {
            let c = object_content(id, v, size);
            assert_eq!(verify_content(id, &c), Some(v));
        }
    }

    #[test]
    fn content_detects_corruption() {
        let mut c = object_content(7, 2, 64);
        c[40] ^= 0xFF;
        assert_eq!(verify_content(7, &c), None);
        let c2 = object_content(8, 2, 64);
        assert_eq!(verify_content(7, &c2), None);
    }

    #[test]
    fn zipf_is_deterministic_and_skewed() {
        let z = ZipfIds::new(1000, 0.99, 0, 7).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<usize> = (0..100).map(|i| z.draw(&mut r1, i)).collect();
        let b: Vec<usize> = (0..100).map(|i| z.draw(&mut r2, i)).collect();
        assert_eq!(a, b);
        // skew: the most common id should dominate
        let mut counts = std::collections::HashMap::new();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for i in 0..20_000u64 {
            *counts.entry(z.draw(&mut r, i)).or_insert(0usize) += 1;
        }
        let max = counts.values().max().unwrap();
        assert!(*max > 20_000 / 100, "zipf skew missing: max={max}");
    }

    #[test]
    fn churn_rotates_the_hot_set() {
        let z = ZipfIds::new(1000, 1.2, 100, 7).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let early: std::collections::HashSet<usize> =
            (0..50u64).map(|i| z.draw(&mut r, i)).collect();
        let late: std::collections::HashSet<usize> =
            (5000..5050u64).map(|i| z.draw(&mut r, i)).collect();
        assert_ne!(early, late);
    }
}
