//! Runtime configuration.

use crate::error::{FmError, Result};
use crate::store::LatencyModel;
use serde::{Deserialize, Serialize};

/// Which ingress policy the runtime follows for remote data.
///
/// `Hybrid` consults the per-page path selector flag. The two others are
/// in-simulator stand-ins for the single-path baselines: a paging-only
/// swap system and an object-only runtime with an object-granularity LRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathPolicy {
    Hybrid,
    PagingOnly,
    ObjectOnly,
}

impl std::str::FromStr for PathPolicy {
    type Err = FmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(PathPolicy::Hybrid),
            "paging_only" | "paging-only" | "paging" => Ok(PathPolicy::PagingOnly),
            "object_only" | "object-only" | "object" => Ok(PathPolicy::ObjectOnly),
            other => Err(FmError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeConfig {
    /// Page size in bytes. Power of two.
    pub page_size: usize,
    /// Card size in bytes. Power of two, at most `page_size`.
    pub card_size: usize,
    /// Local pool capacity in pages.
    pub pool_capacity_pages: usize,
    /// Card access rate at or above which an evicted page's path selector
    /// is set to the paging path.
    pub car_threshold: f64,
    /// Fraction of the pool that may be pinned before pin-pressure relief
    /// force-flips path selectors.
    pub pin_watermark: f64,
    /// Garbage ratio at or above which the evacuator picks a segment.
    pub garbage_threshold: f64,
    /// Evacuation is triggered when free pool capacity drops below this
    /// fraction of the pool.
    pub evac_free_watermark: f64,
    /// Remote capacity in page slots. `None` means unbounded.
    pub remote_capacity_pages: Option<usize>,
    /// When remote capacity is bounded, remote segments are evacuated once
    /// free slots drop below this fraction of capacity.
    pub remote_free_watermark: f64,
    pub path_policy: PathPolicy,
    pub latency: LatencyModel,
    /// Record a full event log for the auditor (cheap inline invariant
    /// checks are always on).
    pub event_log: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            page_size: 4096,
            card_size: 16,
            pool_capacity_pages: 1024,
            car_threshold: 0.80,
            pin_watermark: 0.90,
            garbage_threshold: 0.5,
            evac_free_watermark: 0.10,
            remote_capacity_pages: None,
            remote_free_watermark: 0.10,
            path_policy: PathPolicy::Hybrid,
            latency: LatencyModel::default(),
            event_log: false,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.page_size.is_power_of_two() || self.page_size < 64 {
            return Err(FmError::Config(format!(
                "page_size {} must be a power of two >= 64",
                self.page_size
            )));
        }
        if !self.card_size.is_power_of_two() || self.card_size > self.page_size {
            return Err(FmError::Config(format!(
                "card_size {} must be a power of two <= page_size",
                self.card_size
            )));
        }
        if self.pool_capacity_pages < 4 {
            return Err(FmError::Config(
                "pool_capacity_pages must be at least 4".into(),
            ));
        }
        for (name, v) in [
            ("car_threshold", self.car_threshold),
            ("pin_watermark", self.pin_watermark),
            ("garbage_threshold", self.garbage_threshold),
            ("evac_free_watermark", self.evac_free_watermark),
            ("remote_free_watermark", self.remote_free_watermark),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FmError::Config(format!("{name} {v} must lie in [0,1]")));
            }
        }
        Ok(())
    }

    pub fn page_shift(&self) -> u32 {
        self.page_size.trailing_zeros()
    }

    /// Cards per page.
    pub fn cards_per_page(&self) -> usize {
        self.page_size / self.card_size
    }
}
