//! Per-layer, per-head key/value storage with per-span policies.
//!
//! Positions are appended to an open span; when the chunk that produced them
//! closes, the span is sealed with a [`CachePolicy`]: kept at full precision,
//! quantized to 8 bits, windowed out as it ages, or sparsified down to its
//! highest-mass keys. Excluded positions are masked rather than compacted but
//! are reported as freed by the byte accounting.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SINKS: usize = 4;
const F32_BYTES: usize = 4;
const I8_BYTES: usize = 1;
/// One f32 scale for keys and one for values.
const INT8_SCALE_BYTES: usize = 2 * F32_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    None,
    /// Drop positions older than `current − w`, sinks excepted.
    Window(usize),
    /// Keep the `k` positions with the largest accumulated attention mass.
    Sparsify(usize),
}

/// Storage policy for one sealed span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct CachePolicy {
    pub int8: bool,
    pub reduction: Reduction,
}

impl CachePolicy {
    pub const FULL: CachePolicy = CachePolicy {
        int8: false,
        reduction: Reduction::None,
    };
    pub const INT8: CachePolicy = CachePolicy {
        int8: true,
        reduction: Reduction::None,
    };

    pub fn window(w: usize) -> Self {
        Self {
            int8: false,
            reduction: Reduction::Window(w),
        }
    }

    pub fn sparsify(k: usize) -> Self {
        Self {
            int8: false,
            reduction: Reduction::Sparsify(k),
        }
    }

    pub fn int8_window(w: usize) -> Self {
        Self {
            int8: true,
            reduction: Reduction::Window(w),
        }
    }

    pub fn int8_sparsify(k: usize) -> Self {
        Self {
            int8: true,
            reduction: Reduction::Sparsify(k),
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    /// Windows must not reach into the cross-fade span; sparsify keeps at
    /// least one key.
    pub fn validate(&self, crossfade_window: usize) -> Result<()> {
        match self.reduction {
            Reduction::Window(w) if w == 0 || w < crossfade_window => Err(Error::Config(format!(
                "window {w} shorter than cross-fade window {crossfade_window}"
            ))),
            Reduction::Sparsify(0) => Err(Error::Config("sparsify needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let red = match self.reduction {
            Reduction::None => None,
            Reduction::Window(w) => Some(format!("window({w})")),
            Reduction::Sparsify(k) => Some(format!("sparsify({k})")),
        };
        match (self.int8, red) {
            (false, None) => f.write_str("full"),
            (true, None) => f.write_str("int8"),
            (false, Some(r)) => f.write_str(&r),
            (true, Some(r)) => write!(f, "int8+{r}"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown cache policy `{s}`"));
        let (int8, rest) = match s.as_str() {
            "full" => return Ok(Self::FULL),
            "int8" => return Ok(Self::INT8),
            _ => match s.strip_prefix("int8+") {
                Some(r) => (true, r),
                None => (false, s.as_str()),
            },
        };
        let arg = |name: &str| -> Option<usize> {
            rest.strip_prefix(name)?
                .strip_prefix('(')?
                .strip_suffix(')')?
                .trim()
                .parse()
                .ok()
        };
        let reduction = if let Some(w) = arg("window") {
            Reduction::Window(w)
        } else if let Some(k) = arg("sparsify") {
            Reduction::Sparsify(k)
        } else {
            return Err(bad());
        };
        Ok(Self { int8, reduction })
    }
}

impl From<CachePolicy> for String {
    fn from(p: CachePolicy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for CachePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Symmetric 8-bit quantization with scale `max|x| / 127`, rounding half to
/// even.
pub fn quantize_symmetric(x: &[f32]) -> (Vec<i8>, f32) {
    let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = max / 127.0;
    if scale == 0.0 {
        return (vec![0; x.len()], 0.0);
    }
    let q = x
        .iter()
        .map(|&v| {
            (v as f64 / scale as f64)
                .round_ties_even()
                .clamp(-127.0, 127.0) as i8
        })
        .collect();
    (q, scale)
}

pub fn dequantize(q: i8, scale: f32) -> f32 {
    q as f32 * scale
}

#[derive(Clone, Debug)]
enum Storage {
    Full(Vec<f32>),
    Int8 { q: Vec<i8>, scale: f32 },
}

impl Storage {
    fn read(&self, offset: usize, d: usize) -> Vec<f32> {
        match self {
            Storage::Full(v) => v[offset * d..(offset + 1) * d].to_vec(),
            Storage::Int8 { q, scale } => q[offset * d..(offset + 1) * d]
                .iter()
                .map(|&x| dequantize(x, *scale))
                .collect(),
        }
    }

    fn quantize(&mut self) {
        if let Storage::Full(v) = self {
            let (q, scale) = quantize_symmetric(v);
            *self = Storage::Int8 { q, scale };
        }
    }
}

#[derive(Clone, Debug)]
struct Span {
    start: usize,
    keys: Storage,
    values: Storage,
    excluded: Vec<bool>,
    mass: Vec<f64>,
    policy: Option<CachePolicy>,
}

impl Span {
    fn len(&self) -> usize {
        self.excluded.len()
    }

    fn end(&self) -> usize {
        self.start + self.len()
    }

    fn bytes(&self, d_head: usize) -> usize {
        let included = self.excluded.iter().filter(|&&e| !e).count();
        match self.keys {
            Storage::Full(_) => 2 * included * d_head * F32_BYTES,
            Storage::Int8 { .. } => 2 * included * d_head * I8_BYTES + INT8_SCALE_BYTES,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct HeadCache {
    spans: Vec<Span>,
    len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Leading positions of the sequence never excluded.
    pub sinks: usize,
}

/// Result of one masked attention read.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub context: Vec<f32>,
    /// Weight per cached position; excluded positions carry zero.
    pub weights: Vec<f64>,
    pub participating: usize,
}

#[derive(Clone, Debug)]
pub struct KvStore {
    cfg: KvConfig,
    heads: Vec<HeadCache>,
    bytes: usize,
    peak: usize,
}

impl KvStore {
    pub fn new(cfg: KvConfig) -> Self {
        Self {
            heads: vec![HeadCache::default(); cfg.n_layers * cfg.n_heads],
            cfg,
            bytes: 0,
            peak: 0,
        }
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    fn head_index(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.cfg.n_layers || head >= self.cfg.n_heads {
            return Err(Error::Range(format!(
                "no cache for layer {layer}, head {head}"
            )));
        }
        Ok(layer * self.cfg.n_heads + head)
    }

    /// Positions appended to `(layer, head)`.
    pub fn len_of(&self, layer: usize, head: usize) -> usize {
        self.head_index(layer, head)
            .map(|i| self.heads[i].len)
            .unwrap_or(0)
    }

    /// Positions appended to the first head; all heads advance together in
    /// normal decoding.
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, |h| h.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn memory_bytes(&self) -> usize {
        self.bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }

    /// Recomputes the byte total from the spans.
    pub fn recount_bytes(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|h| &h.spans)
            .map(|s| s.bytes(self.cfg.d_head))
            .sum()
    }

    pub fn append(&mut self, layer: usize, head: usize, k: &[f32], v: &[f32]) -> Result<usize> {
        let d = self.cfg.d_head;
        if k.len() != d || v.len() != d {
            return Err(Error::Shape(format!(
                "key/value lengths {}/{} but d_head is {d}",
                k.len(),
                v.len()
            )));
        }
        let idx = self.head_index(layer, head)?;
        let hc = &mut self.heads[idx];
        let pos = hc.len;
        let open = matches!(hc.spans.last(), Some(s) if s.policy.is_none());
        if !open {
            hc.spans.push(Span {
                start: pos,
                keys: Storage::Full(Vec::new()),
                values: Storage::Full(Vec::new()),
                excluded: Vec::new(),
                mass: Vec::new(),
                policy: None,
            });
        }
        let span = hc.spans.last_mut().expect("open span");
        if let (Storage::Full(ks), Storage::Full(vs)) = (&mut span.keys, &mut span.values) {
            ks.extend_from_slice(k);
            vs.extend_from_slice(v);
        }
        span.excluded.push(false);
        span.mass.push(0.0);
        hc.len += 1;
        self.bytes += 2 * d * F32_BYTES;
        self.peak = self.peak.max(self.bytes);
        Ok(pos)
    }

    /// Seals `range` in every (layer, head) with `policy`.
    pub fn seal_span(&mut self, range: Range<usize>, policy: CachePolicy) -> Result<()> {
        if let Reduction::Sparsify(0) | Reduction::Window(0) = policy.reduction {
            return Err(Error::Policy(format!("degenerate cache policy {policy}")));
        }
        for idx in 0..self.heads.len() {
            let hc = &self.heads[idx];
            let Some(si) = hc
                .spans
                .iter()
                .position(|s| s.start == range.start && s.end() == range.end)
            else {
                return Err(Error::State(format!(
                    "no span {range:?} in layer {}, head {}",
                    idx / self.cfg.n_heads,
                    idx % self.cfg.n_heads
                )));
            };
            if hc.spans[si].policy.is_some() {
                return Err(Error::State(format!("span {range:?} already sealed")));
            }
        }
        let d = self.cfg.d_head;
        let sinks = self.cfg.sinks;
        for hc in &mut self.heads {
            let current = hc.len;
            let span = hc
                .spans
                .iter_mut()
                .find(|s| s.start == range.start)
                .expect("checked above");
            let before = span.bytes(d);
            span.policy = Some(policy);
            if policy.int8 {
                span.keys.quantize();
                span.values.quantize();
            }
            match policy.reduction {
                Reduction::None => {}
                Reduction::Window(w) => window_out(span, current, w, sinks),
                Reduction::Sparsify(k) => {
                    let mut order: Vec<usize> = (0..span.len())
                        .filter(|&i| span.start + i >= sinks)
                        .collect();
                    // Highest mass first; ties keep the more recent key.
                    order.sort_by(|&a, &b| span.mass[b].total_cmp(&span.mass[a]).then(b.cmp(&a)));
                    for &i in order.iter().skip(k) {
                        span.excluded[i] = true;
                    }
                }
            }
            let after = span.bytes(d);
            self.bytes = self.bytes + after - before;
        }
        self.peak = self.peak.max(self.bytes);
        Ok(())
    }

    pub fn is_excluded(&self, layer: usize, head: usize, pos: usize) -> bool {
        self.span_at(layer, head, pos)
            .map(|(s, i)| s.excluded[i])
            .unwrap_or(true)
    }

    pub fn policy_at(&self, layer: usize, head: usize, pos: usize) -> Option<CachePolicy> {
        self.span_at(layer, head, pos).and_then(|(s, _)| s.policy)
    }

    /// Stored (dequantized) key at `pos`.
    pub fn key(&self, layer: usize, head: usize, pos: usize) -> Option<Vec<f32>> {
        self.span_at(layer, head, pos)
            .map(|(s, i)| s.keys.read(i, self.cfg.d_head))
    }

    /// Stored (dequantized) value at `pos`.
    pub fn value(&self, layer: usize, head: usize, pos: usize) -> Option<Vec<f32>> {
        self.span_at(layer, head, pos)
            .map(|(s, i)| s.values.read(i, self.cfg.d_head))
    }

    /// Accumulated attention mass at `pos`.
    pub fn mass(&self, layer: usize, head: usize, pos: usize) -> Option<f64> {
        self.span_at(layer, head, pos).map(|(s, i)| s.mass[i])
    }

    fn span_at(&self, layer: usize, head: usize, pos: usize) -> Option<(&Span, usize)> {
        let hc = &self.heads[self.head_index(layer, head).ok()?];
        hc.spans
            .iter()
            .find(|s| s.start <= pos && pos < s.end())
            .map(|s| (s, pos - s.start))
    }

    /// Drops positions that aged out of windowed spans as of `current_pos`.
    fn advance(&mut self, idx: usize, current_pos: usize) {
        let d = self.cfg.d_head;
        let sinks = self.cfg.sinks;
        for span in &mut self.heads[idx].spans {
            if let Some(CachePolicy {
                reduction: Reduction::Window(w),
                ..
            }) = span.policy
            {
                let before = span.bytes(d);
                window_out(span, current_pos, w, sinks);
                self.bytes = self.bytes + span.bytes(d) - before;
            }
        }
    }

    /// Softmax attention of `query` over the included positions of
    /// `(layer, head)`, scaled by `1/sqrt(d_head)`.
    ///
    /// Scores, normalizer and context are f64 sums in ascending position
    /// order. The weights are added to each position's accumulated mass.
    pub fn attend(
        &mut self,
        layer: usize,
        head: usize,
        query: &[f32],
        current_pos: usize,
    ) -> Result<Attention> {
        let d = self.cfg.d_head;
        if query.len() != d {
            return Err(Error::Shape(format!(
                "query length {} but d_head is {d}",
                query.len()
            )));
        }
        let idx = self.head_index(layer, head)?;
        self.advance(idx, current_pos);
        let hc = &self.heads[idx];
        let inv_sqrt = 1.0 / (d as f64).sqrt();

        let mut scores: Vec<(usize, f64)> = Vec::with_capacity(hc.len);
        for span in &hc.spans {
            for i in 0..span.len() {
                if span.excluded[i] {
                    continue;
                }
                let k = span.keys.read(i, d);
                let s: f64 = query
                    .iter()
                    .zip(&k)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                scores.push((span.start + i, s * inv_sqrt));
            }
        }
        if scores.is_empty() {
            return Err(Error::Policy(format!(
                "no included positions for layer {layer}, head {head} at {current_pos}"
            )));
        }
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &(_, s)| m.max(s));
        let exps: Vec<f64> = scores.iter().map(|&(_, s)| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();

        let mut weights = vec![0.0f64; hc.len];
        let mut ctx = vec![0.0f64; d];
        for (&(pos, _), &e) in scores.iter().zip(&exps) {
            let p = e / z;
            weights[pos] = p;
            let v = self.value(layer, head, pos).expect("cached position");
            for (c, &vi) in ctx.iter_mut().zip(&v) {
                *c += p * vi as f64;
            }
        }
        let hc = &mut self.heads[idx];
        for span in &mut hc.spans {
            for i in 0..span.len() {
                span.mass[i] += weights[span.start + i];
            }
        }
        Ok(Attention {
            context: ctx.into_iter().map(|c| c as f32).collect(),
            weights,
            participating: scores.len(),
        })
    }
}

fn window_out(span: &mut Span, current: usize, w: usize, sinks: usize) {
    let cutoff = current.saturating_sub(w);
    for i in 0..span.len() {
        let pos = span.start + i;
        if pos >= cutoff {
            break;
        }
        if pos >= sinks {
            span.excluded[i] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(sinks: usize) -> KvStore {
        KvStore::new(KvConfig {
            n_layers: 1,
            n_heads: 1,
            d_head: 4,
            sinks,
        })
    }

    fn kv(i: usize) -> (Vec<f32>, Vec<f32>) {
        let k = (0..4)
            .map(|j| ((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5)
            .collect();
        let v = (0..4).map(|j| ((i * 5 + j) % 13) as f32 / 13.0).collect();
        (k, v)
    }

    fn fill(s: &mut KvStore, n: usize) {
        for i in 0..n {
            let (k, v) = kv(i);
            s.append(0, 0, &k, &v).unwrap();
        }
    }

    #[test]
    fn policy_strings_round_trip() {
        for p in [
            CachePolicy::FULL,
            CachePolicy::INT8,
            CachePolicy::window(64),
            CachePolicy::sparsify(3),
            CachePolicy::int8_window(32),
            CachePolicy::int8_sparsify(5),
        ] {
            assert_eq!(p.to_string().parse::<CachePolicy>().unwrap(), p);
        }
        assert!("int8+full".parse::<CachePolicy>().is_err());
        assert!("window(x)".parse::<CachePolicy>().is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(CachePolicy::window(2).validate(4).is_err());
        assert!(CachePolicy::window(4).validate(4).is_ok());
        assert!(CachePolicy::sparsify(0).validate(0).is_err());
    }

    #[test]
    fn append_positions_and_read_back() {
        let mut s = store(0);
        assert!(s.is_empty());
        for i in 0..5 {
            let (k, v) = kv(i);
            assert_eq!(s.append(0, 0, &k, &v).unwrap(), i);
        }
        for i in 0..5 {
            let (k, v) = kv(i);
            assert_eq!(s.key(0, 0, i).unwrap(), k);
            assert_eq!(s.value(0, 0, i).unwrap(), v);
        }
        assert!(s.append(0, 0, &[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn byte_accounting() {
        let mut s = store(0);
        assert_eq!(s.memory_bytes(), 0);
        fill(&mut s, 10);
        assert_eq!(s.memory_bytes(), 2 * 10 * 4 * 4);
        s.seal_span(0..10, CachePolicy::INT8).unwrap();
        assert_eq!(s.memory_bytes(), 2 * 10 * 4 + 8);
        assert_eq!(s.memory_bytes(), s.recount_bytes());
        assert_eq!(s.peak_bytes(), 2 * 10 * 4 * 4);
    }

    #[test]
    fn int8_zero_span_is_exact() {
        let mut s = store(0);
        for _ in 0..6 {
            s.append(0, 0, &[0.0; 4], &[0.0; 4]).unwrap();
        }
        s.seal_span(0..6, CachePolicy::INT8).unwrap();
        for i in 0..6 {
            assert_eq!(s.key(0, 0, i).unwrap(), vec![0.0; 4]);
        }
    }

    #[test]
    fn int8_error_bound() {
        let x: Vec<f32> = (0..64)
            .map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0)
            .collect();
        let (q, scale) = quantize_symmetric(&x);
        let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (&xi, &qi) in x.iter().zip(&q) {
            assert!((xi - dequantize(qi, scale)).abs() <= scale / 2.0 + 1e-7);
            assert!((xi - dequantize(qi, scale)).abs() as f64 <= max as f64 / 254.0 + 1e-7);
        }
    }

    #[test]
    fn sealing_twice_or_mismatched_is_state_error() {
        let mut s = store(0);
        fill(&mut s, 4);
        assert!(matches!(
            s.seal_span(0..3, CachePolicy::INT8),
            Err(Error::State(_))
        ));
        s.seal_span(0..4, CachePolicy::INT8).unwrap();
        assert!(matches!(
            s.seal_span(0..4, CachePolicy::INT8),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn single_key_attention() {
        let mut s = store(0);
        fill(&mut s, 1);
        let a = s.attend(0, 0, &[0.3, -0.1, 0.2, 0.9], 0).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.context, kv(0).1);
        assert_eq!(a.participating, 1);
    }

    #[test]
    fn window_keeps_recent_positions() {
        let mut s = store(0);
        fill(&mut s, 10);
        s.seal_span(0..10, CachePolicy::window(4)).unwrap();
        let a = s.attend(0, 0, &[0.1; 4], 10).unwrap();
        assert_eq!(a.participating, 4);
        assert!((6..10).all(|p| !s.is_excluded(0, 0, p)));
        assert_eq!(s.memory_bytes(), 2 * 4 * 4 * 4);
    }

    #[test]
    fn window_protects_sinks() {
        let mut s = store(2);
        fill(&mut s, 10);
        s.seal_span(0..10, CachePolicy::window(4)).unwrap();
        let a = s.attend(0, 0, &[0.1; 4], 10).unwrap();
        assert_eq!(a.participating, 6);
        assert!(!s.is_excluded(0, 0, 0) && !s.is_excluded(0, 0, 1));
    }

    #[test]
    fn window_ages_out_as_decoding_advances() {
        let mut s = store(0);
        fill(&mut s, 8);
        s.seal_span(0..8, CachePolicy::window(6)).unwrap();
        assert_eq!(s.recount_bytes(), 2 * 6 * 4 * 4);
        for i in 8..12 {
            let (k, v) = kv(i);
            s.append(0, 0, &k, &v).unwrap();
            let a = s.attend(0, 0, &k, i).unwrap();
            // Sealed span keeps positions >= i - 6; the open span is intact.
            assert_eq!(a.participating, (8 - (i - 6)) + (i - 8 + 1));
            assert_eq!(s.memory_bytes(), s.recount_bytes());
        }
    }

    #[test]
    fn sparsify_keeps_heaviest_keys() {
        let mut s = store(0);
        fill(&mut s, 6);
        for _ in 0..3 {
            s.attend(0, 0, &[1.0, -1.0, 0.5, 0.0], 5).unwrap();
        }
        let mut mass: Vec<(usize, f64)> = (0..6).map(|p| (p, s.mass(0, 0, p).unwrap())).collect();
        mass.sort_by(|a, b| b.1.total_cmp(&a.1));
        s.seal_span(0..6, CachePolicy::sparsify(2)).unwrap();
        let kept: Vec<usize> = (0..6).filter(|&p| !s.is_excluded(0, 0, p)).collect();
        let mut want = vec![mass[0].0, mass[1].0];
        want.sort();
        assert_eq!(kept, want);
    }

    #[test]
    fn empty_attention_is_policy_error() {
        let mut s = store(0);
        fill(&mut s, 10);
        s.seal_span(0..10, CachePolicy::window(2)).unwrap();
        // Query far in the future with nothing else cached.
        assert!(matches!(
            s.attend(0, 0, &[0.0; 4], 40),
            Err(Error::Policy(_))
        ));
    }
}
