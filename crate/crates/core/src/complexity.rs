//! Per-token difficulty signals and their fusion into one score in [0, 1].
//!
//! Four streaming signals: normalized next-token entropy, trailing n-gram
//! novelty within a recent window, an attention-distance proxy taken from the
//! previous decode step, and an exponentially decaying positional prior.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::linalg::Scalar;
use crate::{Error, Result};

/// Tolerance on attention distributions handed to [`attention_proxy`].
pub const ATTN_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Weights for (entropy, novelty, attention proxy, positional prior).
    pub weights: [f64; 4],
    pub ngram_order: usize,
    pub novelty_window: usize,
    pub prior_timescale: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            weights: [0.45, 0.25, 0.20, 0.10],
            ngram_order: 3,
            novelty_window: 512,
            prior_timescale: 64,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "estimator weights must be non-negative, got {:?}",
                self.weights
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "estimator weights sum to {sum}, not 1"
            )));
        }
        if self.ngram_order == 0 {
            return Err(Error::Config("ngram_order must be at least 1".into()));
        }
        if self.novelty_window < self.ngram_order {
            return Err(Error::Config(
                "novelty_window must hold at least one n-gram".into(),
            ));
        }
        if self.prior_timescale == 0 {
            return Err(Error::Config("prior_timescale must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySignals {
    pub entropy: f64,
    pub novelty: f64,
    pub attn_proxy: f64,
    pub pos_prior: f64,
    pub combined: f64,
}

/// Softmax entropy divided by `ln(vocab)`.
pub fn entropy_norm<T: Scalar>(logits: &[T]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Domain(
            "entropy needs a vocabulary of at least 2".into(),
        ));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    let max = logits
        .iter()
        .map(|l| l.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l.as_f64() - max).collect();
    let z: f64 = shifted.iter().map(|s| s.exp()).sum();
    let log_z = z.ln();
    let h: f64 = shifted
        .iter()
        .map(|&s| {
            let p = s.exp() / z;
            if p > 0.0 {
                -p * (s - log_z)
            } else {
                0.0
            }
        })
        .sum();
    Ok((h / (logits.len() as f64).ln()).clamp(0.0, 1.0))
}

/// `1 / (1 + c)` where `c` counts earlier occurrences of the trailing n-gram
/// inside the last `novelty_window` tokens. Full-history reference version.
pub fn ngram_novelty(history: &[u8], cfg: &EstimatorConfig) -> f64 {
    let n = cfg.ngram_order;
    let len = history.len();
    if len < n {
        return 1.0;
    }
    let trailing = &history[len - n..];
    let lo = len.saturating_sub(cfg.novelty_window);
    let c = (lo..len - n)
        .filter(|&i| &history[i..i + n] == trailing)
        .count();
    1.0 / (1.0 + c as f64)
}

/// Incremental form of [`ngram_novelty`] for one stream.
#[derive(Clone, Debug)]
pub struct NoveltyTracker {
    order: usize,
    window: usize,
    recent: VecDeque<u8>,
    counts: HashMap<Vec<u8>, usize>,
}

impl NoveltyTracker {
    pub fn new(cfg: &EstimatorConfig) -> Self {
        Self {
            order: cfg.ngram_order,
            window: cfg.novelty_window,
            recent: VecDeque::with_capacity(cfg.novelty_window + 1),
            counts: HashMap::new(),
        }
    }

    /// Appends a token and returns the novelty of the sequence ending there.
    pub fn push(&mut self, token: u8) -> f64 {
        let n = self.order;
        self.recent.push_back(token);
        if self.recent.len() > self.window {
            // The oldest n-gram slides out of the window.
            if self.recent.len() > n {
                let old: Vec<u8> = self.recent.iter().take(n).copied().collect();
                if let Some(c) = self.counts.get_mut(&old) {
                    *c -= 1;
                    if *c == 0 {
                        self.counts.remove(&old);
                    }
                }
            }
            self.recent.pop_front();
        }
        if self.recent.len() < n {
            return 1.0;
        }
        let tail: Vec<u8> = self
            .recent
            .iter()
            .skip(self.recent.len() - n)
            .copied()
            .collect();
        let c = self.counts.entry(tail).or_insert(0);
        *c += 1;
        1.0 / (*c as f64)
    }
}

/// Mean over heads of the expected attention distance, normalized by the
/// query position.
pub fn attention_proxy(attn: &[Vec<f64>], query_pos: usize) -> Result<f64> {
    for (h, dist) in attn.iter().enumerate() {
        if dist.len() != query_pos + 1 {
            return Err(Error::Domain(format!(
                "head {h}: distribution over {} positions, expected {}",
                dist.len(),
                query_pos + 1
            )));
        }
        if dist.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Domain(format!(
                "head {h}: negative or non-finite mass"
            )));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > ATTN_SUM_TOL {
            return Err(Error::Domain(format!("head {h}: mass sums to {sum}")));
        }
    }
    if query_pos == 0 || attn.is_empty() {
        return Ok(0.0);
    }
    let t = query_pos as f64;
    let total: f64 = attn
        .iter()
        .map(|dist| {
            dist.iter()
                .enumerate()
                .map(|(j, &p)| p * (query_pos - j) as f64)
                .sum::<f64>()
                / t
        })
        .sum();
    Ok((total / attn.len() as f64).clamp(0.0, 1.0))
}

/// `exp(−t / T)`.
pub fn positional_prior(t: usize, cfg: &EstimatorConfig) -> f64 {
    (-(t as f64) / cfg.prior_timescale as f64).exp()
}

/// Weighted sum of the four signals, clamped to [0, 1].
pub fn combine(signals: [f64; 4], cfg: &EstimatorConfig) -> Result<f64> {
    cfg.validate()?;
    if signals.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Domain(format!(
            "signals outside [0, 1]: {signals:?}"
        )));
    }
    let s: f64 = signals.iter().zip(&cfg.weights).map(|(s, w)| s * w).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Streaming estimator state for one decode stream.
///
/// The attention proxy for position `t` reads the last layer's attention
/// from step `t − 1`; the current step's weights are stashed for the next
/// call. Nothing here feeds back into the adapter path.
#[derive(Clone, Debug)]
pub struct ComplexityEstimator {
    cfg: EstimatorConfig,
    novelty: NoveltyTracker,
    prev_attn: Option<(usize, Vec<Vec<f64>>)>,
    pos: usize,
}

impl ComplexityEstimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            novelty: NoveltyTracker::new(&cfg),
            cfg,
            prev_attn: None,
            pos: 0,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    /// Scores the token just processed at the next position.
    ///
    /// `logits` are this step's output; `last_layer_attn` is this step's
    /// last-layer attention and is only used at the following step.
    pub fn observe<T: Scalar>(
        &mut self,
        token: u8,
        logits: &[T],
        last_layer_attn: &[Vec<f64>],
    ) -> Result<ComplexitySignals> {
        let entropy = entropy_norm(logits)?;
        let novelty = self.novelty.push(token);
        let attn_proxy = match &self.prev_attn {
            Some((q, attn)) => attention_proxy(attn, *q)?,
            None => 0.0,
        };
        let pos_prior = positional_prior(self.pos, &self.cfg);
        let combined = combine([entropy, novelty, attn_proxy, pos_prior], &self.cfg)?;
        self.prev_attn = Some((self.pos, last_layer_attn.to_vec()));
        self.pos += 1;
        Ok(ComplexitySignals {
            entropy,
            novelty,
            attn_proxy,
            pos_prior,
            combined,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EstimatorConfig {
        EstimatorConfig::default()
    }

    #[test]
    fn entropy_analytic_cases() {
        assert_eq!(entropy_norm(&vec![0.0f32; 256]).unwrap(), 1.0);
        let mut point = vec![0.0f64; 256];
        point[17] = 1e6;
        assert!(entropy_norm(&point).unwrap() <= 1e-6);
        let mut two = vec![-1e6f64; 256];
        two[3] = 0.0;
        two[9] = 0.0;
        let h = entropy_norm(&two).unwrap();
        assert!((h - 0.125).abs() < 1e-12, "{h}");
    }

    #[test]
    fn entropy_errors() {
        assert!(matches!(entropy_norm(&[1.0f64]), Err(Error::Domain(_))));
        assert!(matches!(
            entropy_norm(&[1.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn novelty_formula() {
        let c = cfg();
        assert_eq!(ngram_novelty(b"ab", &c), 1.0);
        assert_eq!(ngram_novelty(b"abc", &c), 1.0);
        assert_eq!(ngram_novelty(b"abcxabc", &c), 0.5);
    }

    #[test]
    fn novelty_periodic_stream() {
        let c = cfg();
        let stream: Vec<u8> = b"abc".repeat(10);
        // Independent window count: trailing "abc" starts at 27; earlier
        // starts 0, 3, ..., 24 all lie in the window.
        let n = stream.len();
        let earlier = (0..n - 3).filter(|&i| &stream[i..i + 3] == b"abc").count();
        assert_eq!(earlier, 9);
        assert_eq!(ngram_novelty(&stream, &c), 1.0 / 10.0);
    }

    #[test]
    fn novelty_window_limits_count() {
        let c = EstimatorConfig {
            novelty_window: 6,
            ..cfg()
        };
        let stream = b"abcabcabc";
        // Window = "abcabc", only the start at 3 precedes the trailing one.
        assert_eq!(ngram_novelty(stream, &c), 0.5);
    }

    #[test]
    fn attention_proxy_cases() {
        let t = 6;
        let mut current = vec![0.0; t + 1];
        current[t] = 1.0;
        assert_eq!(attention_proxy(&[current], t).unwrap(), 0.0);
        let mut first = vec![0.0; t + 1];
        first[0] = 1.0;
        assert_eq!(attention_proxy(&[first.clone(), first], t).unwrap(), 1.0);
        let uniform = vec![1.0 / (t + 1) as f64; t + 1];
        assert!((attention_proxy(&[uniform], t).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(attention_proxy(&[vec![1.0]], 0).unwrap(), 0.0);
    }

    #[test]
    fn attention_proxy_rejects_malformed() {
        assert!(attention_proxy(&[vec![0.5, 0.4]], 1).is_err());
        assert!(attention_proxy(&[vec![1.5, -0.5]], 1).is_err());
        assert!(attention_proxy(&[vec![1.0]], 1).is_err());
    }

    #[test]
    fn prior_values() {
        let c = cfg();
        assert_eq!(positional_prior(0, &c), 1.0);
        assert!((positional_prior(64, &c) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((positional_prior(64, &c) - 0.36788).abs() < 1e-5);
        for t in 0..200 {
            assert!(positional_prior(t + 1, &c) < positional_prior(t, &c));
        }
    }

    #[test]
    fn combine_cases() {
        let c = cfg();
        assert_eq!(combine([0.0; 4], &c).unwrap(), 0.0);
        assert!((combine([1.0; 4], &c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(combine([1.0, 0.0, 0.0, 0.0], &c).unwrap(), 0.45);
        let bad = EstimatorConfig {
            weights: [0.5, 0.5, 0.5, 0.0],
            ..c
        };
        assert!(matches!(combine([0.0; 4], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn estimator_uses_previous_step_attention() {
        let mut est = ComplexityEstimator::new(cfg()).unwrap();
        let logits = vec![0.0f32; 8];
        let s0 = est.observe(1, &logits, &[vec![1.0]]).unwrap();
        assert_eq!(s0.attn_proxy, 0.0);
        assert_eq!(s0.pos_prior, 1.0);
        // Step 1 sees step 0's distribution over a single position.
        let s1 = est.observe(2, &logits, &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(s1.attn_proxy, 0.0);
        let s2 = est.observe(3, &logits, &[vec![1.0, 0.0, 0.0]]).unwrap();
        // Step 1's weights put all mass on position 0 from query 1.
        assert_eq!(s2.attn_proxy, 1.0);
    }
}
