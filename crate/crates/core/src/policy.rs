//! Percentile calibration and the chunk → (rank, scale, cache policy) map.

use serde::{Deserialize, Serialize};

use crate::adapter::{ChunkAdapterSetting, RankSet};
use crate::chunker::Chunk;
use crate::kvcache::CachePolicy;
use crate::{Error, Result};

pub const MIN_CALIBRATION_SCORES: usize = 10;
/// Percentiles of the default two band edges.
pub const EDGE_PERCENTILES: [usize; 2] = [33, 66];
pub const DEFAULT_RANKS: [usize; 3] = [4, 8, 16];
pub const DEFAULT_SCALES: [f64; 3] = [0.5, 0.75, 1.0];
/// Window of the lowest band's cache policy.
pub const DEFAULT_LOW_WINDOW: usize = 64;

pub fn default_cache_policies() -> Vec<CachePolicy> {
    vec![
        CachePolicy::int8_window(DEFAULT_LOW_WINDOW),
        CachePolicy::INT8,
        CachePolicy::FULL,
    ]
}

/// Ordered complexity bands. Band `i` covers `[edge[i-1], edge[i])`; the
/// first band is open below and the last open above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    band_edges: Vec<f64>,
    rank_per_band: Vec<usize>,
    scale_per_band: Vec<f64>,
    cache_per_band: Vec<CachePolicy>,
}

impl PolicyTable {
    pub fn new(
        band_edges: Vec<f64>,
        rank_per_band: Vec<usize>,
        scale_per_band: Vec<f64>,
        cache_per_band: Vec<CachePolicy>,
    ) -> Result<Self> {
        let bands = band_edges.len() + 1;
        if rank_per_band.len() != bands
            || scale_per_band.len() != bands
            || cache_per_band.len() != bands
        {
            return Err(Error::Config(format!(
                "{} edges need {bands} ranks, scales and cache policies",
                band_edges.len()
            )));
        }
        if band_edges.iter().any(|e| !e.is_finite()) || band_edges.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "band edges must be finite and ascending: {band_edges:?}"
            )));
        }
        if let Some(s) = scale_per_band.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("band scale {s} outside [0, 1]")));
        }
        Ok(Self {
            band_edges,
            rank_per_band,
            scale_per_band,
            cache_per_band,
        })
    }

    /// Three-band table with the default ranks, scales and cache pairing.
    pub fn with_edges(low: f64, high: f64) -> Result<Self> {
        Self::new(
            vec![low, high],
            DEFAULT_RANKS.to_vec(),
            DEFAULT_SCALES.to_vec(),
            default_cache_policies(),
        )
    }

    /// One band holding a single setting everywhere.
    pub fn single_band(setting: ChunkAdapterSetting, cache: CachePolicy) -> Self {
        Self {
            band_edges: Vec::new(),
            rank_per_band: vec![setting.rank],
            scale_per_band: vec![setting.scale],
            cache_per_band: vec![cache],
        }
    }

    /// Checks every band's rank against the ladders' allowed set; rank 0 is
    /// accepted only when `allow_rank_zero` is set.
    pub fn check_ranks(&self, allowed: &RankSet, allow_rank_zero: bool) -> Result<()> {
        for &r in &self.rank_per_band {
            let ok = if r == 0 {
                allow_rank_zero
            } else {
                allowed.contains(r)
            };
            if !ok {
                return Err(Error::Config(format!(
                    "band rank {r} not in allowed ranks {:?}",
                    allowed.ranks()
                )));
            }
        }
        Ok(())
    }

    pub fn band_edges(&self) -> &[f64] {
        &self.band_edges
    }

    pub fn ranks(&self) -> &[usize] {
        &self.rank_per_band
    }

    pub fn scales(&self) -> &[f64] {
        &self.scale_per_band
    }

    pub fn cache_policies(&self) -> &[CachePolicy] {
        &self.cache_per_band
    }

    pub fn n_bands(&self) -> usize {
        self.rank_per_band.len()
    }

    pub fn top_band(&self) -> usize {
        self.n_bands() - 1
    }

    /// Highest band whose lower edge is `<= level`.
    pub fn band_of(&self, level: f64) -> usize {
        self.band_edges.iter().take_while(|&&e| e <= level).count()
    }

    pub fn setting(&self, band: usize) -> ChunkAdapterSetting {
        ChunkAdapterSetting {
            rank: self.rank_per_band[band],
            scale: self.scale_per_band[band],
        }
    }

    pub fn cache(&self, band: usize) -> CachePolicy {
        self.cache_per_band[band]
    }

    /// Setting and cache policy for a complexity level, enforcing the
    /// high-capacity budget. A single-band table has nothing to demote to
    /// and spends no budget.
    pub fn select_level(&self, level: f64, budget: &mut BudgetState) -> Selection {
        let band = self.band_of(level);
        let top = self.top_band();
        let (band, demoted) = if band == top && top > 0 {
            if budget.remaining > 0 {
                budget.remaining -= 1;
                (band, false)
            } else {
                (top.saturating_sub(1), true)
            }
        } else {
            (band, false)
        };
        Selection {
            band,
            setting: self.setting(band),
            cache_policy: self.cache(band),
            demoted,
        }
    }

    pub fn select(&self, chunk: &Chunk, budget: &mut BudgetState) -> ChunkPlan {
        let s = self.select_level(chunk.mean_complexity, budget);
        ChunkPlan {
            chunk: *chunk,
            band: s.band,
            setting: s.setting,
            cache_policy: s.cache_policy,
            demoted: s.demoted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub band: usize,
    pub setting: ChunkAdapterSetting,
    pub cache_policy: CachePolicy,
    pub demoted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk: Chunk,
    pub band: usize,
    pub setting: ChunkAdapterSetting,
    pub cache_policy: CachePolicy,
    pub demoted: bool,
}

/// Remaining top-band plans for one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetState {
    pub remaining: usize,
}

impl BudgetState {
    pub fn new(budget_high: usize) -> Self {
        Self {
            remaining: budget_high,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub table: PolicyTable,
    /// Chunker threshold; the upper band edge.
    pub tau: f64,
}

/// Nearest-rank percentile: the `ceil(p·N/100)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], p: usize) -> f64 {
    let n = sorted.len();
    let rank = ((p * n).div_ceil(100)).max(1);
    sorted[rank - 1]
}

/// Default three-band table from validation scores (edges at p33 and p66).
pub fn calibrate(scores: &[f64]) -> Result<Calibration> {
    if scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::Calibration(format!(
            "need at least {MIN_CALIBRATION_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let low = nearest_rank(&sorted, EDGE_PERCENTILES[0]);
    let high = nearest_rank(&sorted, EDGE_PERCENTILES[1]);
    Ok(Calibration {
        table: PolicyTable::with_edges(low, high)?,
        tau: high,
    })
}
