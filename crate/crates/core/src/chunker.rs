//! Online grouping of scored tokens into contiguous variable-length chunks.
//!
//! A chunk closes when it reaches `l_max`, or when it is at least `l_min`
//! long and the running exponential mean of the scores leaves the hysteresis
//! band `tau ± h` on the side opposite to the chunk's opening regime.
//! Boundaries depend only on scores already observed.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Decay of the running exponential mean, `m ← 0.8·m + 0.2·s`.
pub const EMA_DECAY: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub tau: f64,
    pub hysteresis: f64,
    pub budget_high: usize,
    pub crossfade_window: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self {
            l_min: 8,
            l_max: 64,
            tau: 0.5,
            hysteresis: 0.05,
            budget_high: 4,
            crossfade_window: 4,
        }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_min == 0 || self.l_min > self.l_max {
            return Err(Error::Config(format!(
                "need 1 <= l_min <= l_max, got {} and {}",
                self.l_min, self.l_max
            )));
        }
        if !(self.tau - self.hysteresis > 0.0 && self.tau + self.hysteresis < 1.0)
            || self.hysteresis < 0.0
        {
            return Err(Error::Config(format!(
                "hysteresis band {} ± {} must lie inside (0, 1)",
                self.tau, self.hysteresis
            )));
        }
        if self.crossfade_window > self.l_min {
            return Err(Error::Config(format!(
                "crossfade window {} exceeds l_min {}",
                self.crossfade_window, self.l_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkClass {
    Low,
    High,
}

/// Token span `[start, end)` with its mean complexity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub mean_complexity: f64,
    pub class: ChunkClass,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Regime {
    Low,
    High,
}

#[derive(Clone, Debug)]
pub struct Chunker {
    cfg: ChunkerConfig,
    start: usize,
    len: usize,
    sum: f64,
    ema: Option<f64>,
    regime: Regime,
}

impl Chunker {
    pub fn new(cfg: ChunkerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            start: 0,
            len: 0,
            sum: 0.0,
            ema: None,
            regime: Regime::Low,
        })
    }

    pub fn config(&self) -> &ChunkerConfig {
        &self.cfg
    }

    /// Running exponential mean over every score seen so far.
    pub fn running_mean(&self) -> Option<f64> {
        self.ema
    }

    /// Tokens observed so far.
    pub fn position(&self) -> usize {
        self.start + self.len
    }

    pub fn open_len(&self) -> usize {
        self.len
    }

    /// Adds the next token's score; returns the chunk it closes, if any.
    pub fn observe(&mut self, score: f64) -> Option<Chunk> {
        let score = score.clamp(0.0, 1.0);
        let ema = match self.ema {
            Some(m) => EMA_DECAY * m + (1.0 - EMA_DECAY) * score,
            None => score,
        };
        self.ema = Some(ema);
        if self.len == 0 {
            self.regime = if ema >= self.cfg.tau {
                Regime::High
            } else {
                Regime::Low
            };
        }
        self.len += 1;
        self.sum += score;

        let full = self.len >= self.cfg.l_max;
        let crossed = self.len >= self.cfg.l_min
            && match self.regime {
                Regime::Low => ema > self.cfg.tau + self.cfg.hysteresis,
                Regime::High => ema < self.cfg.tau - self.cfg.hysteresis,
            };
        if full || crossed {
            self.close()
        } else {
            None
        }
    }

    /// Closes whatever is open, even below `l_min`.
    pub fn flush(&mut self) -> Option<Chunk> {
        self.close()
    }

    fn close(&mut self) -> Option<Chunk> {
        if self.len == 0 {
            return None;
        }
        let mean = self.sum / self.len as f64;
        let chunk = Chunk {
            start: self.start,
            end: self.start + self.len,
            mean_complexity: mean,
            class: if mean >= self.cfg.tau {
                ChunkClass::High
            } else {
                ChunkClass::Low
            },
        };
        self.start = chunk.end;
        self.len = 0;
        self.sum = 0.0;
        Some(chunk)
    }
}

/// Chunks a complete trace, flushing the tail.
pub fn chunk_trace(cfg: &ChunkerConfig, scores: &[f64]) -> Result<Vec<Chunk>> {
    let mut c = Chunker::new(cfg.clone())?;
    let mut out: Vec<Chunk> = scores.iter().filter_map(|&s| c.observe(s)).collect();
    out.extend(c.flush());
    Ok(out)
}
