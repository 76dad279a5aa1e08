//! Decode orchestration: estimator → chunker → policy → adapter and cache.
//!
//! When the chunker closes a chunk, the policy table maps it to a plan. The
//! plan's cache policy seals the chunk's own span at once; its adapter
//! setting only governs tokens from the next chunk on, cross-faded in over
//! `crossfade_window` tokens. The first chunk runs the middle band's setting.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod metrics;

use std::time::Instant;

use crate::adapter::{
    load_adapter, synthesize_adapter, AdapterBank, AdapterMix, ChunkAdapterSetting, LoraAdapter,
};
use crate::chunker::{Chunk, Chunker, ChunkerConfig, EMA_DECAY};
use crate::complexity::{ComplexityEstimator, ComplexitySignals};
use crate::kvcache::{CachePolicy, KvConfig, KvStore};
use crate::policy::{calibrate, BudgetState, PolicyTable};
use crate::toymodel::{greedy, init_model, load_model, ActiveAdapterSet, ModelWeights, StepOutput};
use crate::{Error, Result};

pub use config::{AdapterSource, CorpusSource, Mode, ModelSource, RunConfig};
pub use corpus::{bimodal_corpus, load_corpus, save_corpus, CorpusSpec};
pub use metrics::{ChunkRecord, MetricsReport};

/// Seed of the synthesized adapter at a site.
pub fn site_seed(seed: u64, layer: usize, kind_code: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((layer as u64) << 8) | kind_code as u64)
}

/// One synthesized adapter per site of `model`.
pub fn synthesize_bank_adapters(
    model: &ModelWeights,
    seed: u64,
    r_max: usize,
) -> Result<Vec<LoraAdapter<f64>>> {
    model
        .cfg
        .sites()
        .into_iter()
        .map(|site| {
            let (d_out, d_in) = model.cfg.site_dims(site.kind);
            synthesize_adapter(
                site,
                d_out,
                d_in,
                r_max,
                site_seed(seed, site.layer, site.kind.code()),
            )
        })
        .collect()
}

pub fn load_corpus_source(src: &CorpusSource) -> Result<Vec<Vec<u8>>> {
    match src {
        CorpusSource::Synthetic(spec) => Ok(bimodal_corpus(spec)),
        CorpusSource::File(p) => load_corpus(p),
    }
}

/// Loaded model, adapter ladders and resolved policy for one config.
#[derive(Clone, Debug)]
pub struct Runtime {
    cfg: RunConfig,
    model: ModelWeights,
    bank: AdapterBank<f64>,
    table: PolicyTable,
    chunker: ChunkerConfig,
    kv: KvConfig,
}

impl Runtime {
    /// Loads or generates the model and adapters and resolves the policy
    /// table, calibrating when the config does not give one.
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = match &cfg.model {
            ModelSource::Seed(m) => init_model(m)?,
            ModelSource::File(p) => load_model(p)?,
        };
        let adapters = match &cfg.adapters {
            AdapterSource::Seed { seed, r_max } => synthesize_bank_adapters(&model, *seed, *r_max)?,
            AdapterSource::Files(files) => files
                .iter()
                .map(|p| load_adapter(p))
                .collect::<Result<_>>()?,
        };
        Self::with_adapters(cfg, model, &adapters)
    }

    pub fn with_adapters(
        cfg: RunConfig,
        model: ModelWeights,
        adapters: &[LoraAdapter<f64>],
    ) -> Result<Self> {
        for a in adapters {
            if a.site.layer >= model.cfg.n_layers {
                return Err(Error::Config(format!(
                    "adapter site {} beyond model",
                    a.site
                )));
            }
            let dims = model.cfg.site_dims(a.site.kind);
            if (a.d_out(), a.d_in()) != dims {
                return Err(Error::Config(format!(
                    "adapter {} is {}x{}, model site is {}x{}",
                    a.site,
                    a.d_out(),
                    a.d_in(),
                    dims.0,
                    dims.1
                )));
            }
        }
        let bank = AdapterBank::build(adapters, &cfg.allowed_ranks)?;
        Self::with_bank(cfg, model, bank)
    }

    /// Uses an already built bank; ladders are shared by cloning.
    pub fn with_bank(cfg: RunConfig, model: ModelWeights, bank: AdapterBank<f64>) -> Result<Self> {
        cfg.validate()?;
        let kv = KvConfig {
            sinks: cfg.sinks,
            ..model.cfg.kv_config()
        };
        let mut chunker = cfg.chunker.clone();
        let mut rt = Self {
            table: PolicyTable::single_band(ChunkAdapterSetting::OFF, CachePolicy::FULL),
            chunker: chunker.clone(),
            cfg,
            model,
            bank,
            kv,
        };
        let (table, tau) = match (&rt.cfg.mode, &rt.cfg.policy) {
            (Mode::Static(s), _) => {
                chunker.crossfade_window = 0;
                (PolicyTable::single_band(*s, CachePolicy::FULL), rt.cfg.tau)
            }
            (Mode::Chunkwise, Some(t)) => (t.clone(), rt.cfg.tau),
            (Mode::Chunkwise, None) => {
                let scores = rt.calibration_scores()?;
                let cal = calibrate(&scores)?;
                (cal.table, Some(rt.cfg.tau.unwrap_or(cal.tau)))
            }
        };
        if let Some(t) = tau {
            chunker.tau = t;
        }
        chunker.validate().map_err(|e| match e {
            Error::Config(m) if rt.cfg.tau.is_none() => Error::Calibration(m),
            e => e,
        })?;
        table.check_ranks(&rt.cfg.allowed_ranks, rt.cfg.allow_rank_zero)?;
        for p in table.cache_policies() {
            p.validate(chunker.crossfade_window)?;
        }
        rt.table = table;
        rt.chunker = chunker;
        Ok(rt)
    }

    /// Per-token running means of the complexity score over the calibration
    /// corpus, decoded under the static top-rank setting. These are the
    /// levels the chunker and selector threshold.
    pub fn calibration_scores(&self) -> Result<Vec<f64>> {
        self.calibration_scores_on(&load_corpus_source(&self.cfg.calibration)?)
    }

    pub fn calibration_scores_on(&self, corpus: &[Vec<u8>]) -> Result<Vec<f64>> {
        let top = ChunkAdapterSetting::new(self.cfg.allowed_ranks.max(), 1.0)?;
        let probe = Self {
            table: PolicyTable::single_band(top, CachePolicy::FULL),
            chunker: ChunkerConfig {
                crossfade_window: 0,
                ..ChunkerConfig::default()
            },
            ..self.clone()
        };
        let mut scores = Vec::new();
        for seq in corpus {
            let mut s = probe.stream()?;
            for &b in seq {
                s.step(b)?;
            }
            let mut ema = None;
            for sig in s.signals() {
                let m = match ema {
                    Some(m) => EMA_DECAY * m + (1.0 - EMA_DECAY) * sig.combined,
                    None => sig.combined,
                };
                ema = Some(m);
                scores.push(m);
            }
        }
        Ok(scores)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelWeights {
        &self.model
    }

    pub fn bank(&self) -> &AdapterBank<f64> {
        &self.bank
    }

    pub fn table(&self) -> &PolicyTable {
        &self.table
    }

    /// Chunker settings in effect, with tau resolved.
    pub fn chunker_config(&self) -> &ChunkerConfig {
        &self.chunker
    }

    pub fn stream(&self) -> Result<DecodeStream<'_>> {
        DecodeStream::new(self)
    }

    /// Greedy generation of `decode.length` tokens after prefilling
    /// `prompt`. Perplexity is taken over the teacher-forced prompt.
    pub fn decode(&self, prompt: &[u8]) -> Result<(Vec<u8>, MetricsReport)> {
        if prompt.is_empty() {
            return Err(Error::Domain("prompt must hold at least one byte".into()));
        }
        let t0 = Instant::now();
        let mut s = self.stream()?;
        let mut nll = 0.0;
        let mut last: Option<Vec<f32>> = None;
        for &b in prompt {
            if let Some(out) = &last {
                nll += token_nll(out, b);
            }
            last = Some(s.step(b)?.logits);
        }
        let mut generated = Vec::with_capacity(self.cfg.decode_length);
        while generated.len() < self.cfg.decode_length {
            let next = greedy(last.as_ref().expect("prompt is non-empty")) as u8;
            generated.push(next);
            if generated.len() < self.cfg.decode_length {
                last = Some(s.step(next)?.logits);
            }
        }
        let ppl = (prompt.len() >= 2).then(|| (nll / (prompt.len() - 1) as f64).exp());
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        let report = s.finish(generated.len(), elapsed, ppl)?;
        Ok((generated, report))
    }

    /// Teacher-forced pass over `text` under the configured schedule.
    pub fn run_forced(&self, text: &[u8]) -> Result<ForcedRun> {
        if text.len() < 2 {
            return Err(Error::Domain(format!(
                "evaluation text needs at least 2 bytes, got {}",
                text.len()
            )));
        }
        let t0 = Instant::now();
        let mut s = self.stream()?;
        let mut nll = Vec::with_capacity(text.len() - 1);
        for (i, &b) in text.iter().enumerate() {
            let out = s.step(b)?;
            if let Some(&next) = text.get(i + 1) {
                nll.push(token_nll(&out.logits, next));
            }
        }
        let ppl = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        let mixes = s.mixes.clone();
        let report = s.finish(text.len(), elapsed, Some(ppl))?;
        Ok(ForcedRun { nll, mixes, report })
    }

    pub fn perplexity(&self, text: &[u8]) -> Result<f64> {
        Ok(self.run_forced(text)?.perplexity())
    }

    /// Prefills every prompt, groups the streams by complexity band, then
    /// decodes bucket by bucket. Results come back in input order.
    pub fn decode_batch(&self, prompts: &[Vec<u8>]) -> Result<BatchResult> {
        let mut streams = Vec::with_capacity(prompts.len());
        let mut lasts = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.is_empty() {
                return Err(Error::Domain("prompt must hold at least one byte".into()));
            }
            let mut s = self.stream()?;
            let mut last = None;
            for &b in p {
                last = Some(s.step(b)?.logits);
            }
            streams.push(s);
            lasts.push(last.expect("non-empty"));
        }
        let buckets = bucket_batch(&self.table, &streams)?;
        let mut outputs: Vec<Option<(Vec<u8>, MetricsReport)>> = vec![None; prompts.len()];
        let mut slots: Vec<Option<DecodeStream<'_>>> = streams.into_iter().map(Some).collect();
        for bucket in &buckets {
            for &i in bucket {
                let t0 = Instant::now();
                let mut s = slots[i].take().expect("each stream in one bucket");
                let mut last = lasts[i].clone();
                let mut generated = Vec::with_capacity(self.cfg.decode_length);
                while generated.len() < self.cfg.decode_length {
                    let next = greedy(&last) as u8;
                    generated.push(next);
                    if generated.len() < self.cfg.decode_length {
                        last = s.step(next)?.logits;
                    }
                }
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                let report = s.finish(generated.len(), ms, None)?;
                outputs[i] = Some((generated, report));
            }
        }
        Ok(BatchResult {
            buckets,
            outputs: outputs
                .into_iter()
                .map(|o| o.expect("all decoded"))
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub buckets: Vec<Vec<usize>>,
    pub outputs: Vec<(Vec<u8>, MetricsReport)>,
}

#[derive(Clone, Debug)]
pub struct ForcedRun {
    /// Negative log-likelihood of each byte after the first.
    pub nll: Vec<f64>,
    /// Adapter mix applied at each position.
    pub mixes: Vec<AdapterMix>,
    pub report: MetricsReport,
}

impl ForcedRun {
    pub fn perplexity(&self) -> f64 {
        self.report
            .perplexity
            .expect("forced runs carry perplexity")
    }
}

/// `-log softmax(logits)[target]`, in f64.
pub fn token_nll(logits: &[f32], target: u8) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
    let lse = max
        + logits
            .iter()
            .map(|&l| (l as f64 - max).exp())
            .sum::<f64>()
            .ln();
    lse - logits[target as usize] as f64
}

/// Groups streams by the policy band of their current running mean.
/// Buckets are ordered by band; members keep input order.
pub fn bucket_batch(table: &PolicyTable, streams: &[DecodeStream<'_>]) -> Result<Vec<Vec<usize>>> {
    let levels = streams
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.running_mean()
                .ok_or_else(|| Error::State(format!("stream {i} has no scored token")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bucket_levels(table, &levels))
}

pub fn bucket_levels(table: &PolicyTable, levels: &[f64]) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); table.n_bands()];
    for (i, &m) in levels.iter().enumerate() {
        buckets[table.band_of(m)].push(i);
    }
    buckets.retain(|b| !b.is_empty());
    buckets
}

/// Adapter schedule: the latest plan's setting, optionally fading in from the
/// previous one over `window` tokens from `boundary`.
#[derive(Clone, Copy, Debug)]
struct Schedule {
    current: ChunkAdapterSetting,
    outgoing: Option<ChunkAdapterSetting>,
    boundary: usize,
    window: usize,
}

impl Schedule {
    fn mix(&self, pos: usize) -> AdapterMix {
        match self.outgoing {
            Some(out) if pos >= self.boundary && pos < self.boundary + self.window => {
                let lambda = 1.0 - (pos - self.boundary) as f64 / self.window as f64;
                AdapterMix::Blend {
                    outgoing: out,
                    incoming: self.current,
                    lambda,
                }
            }
            _ => AdapterMix::Single(self.current),
        }
    }

    fn switch(&mut self, next: ChunkAdapterSetting, boundary: usize) {
        self.outgoing = (next != self.current && self.window > 0).then_some(self.current);
        self.current = next;
        self.boundary = boundary;
    }
}

/// Per-sequence decode state.
pub struct DecodeStream<'r> {
    rt: &'r Runtime,
    cache: KvStore,
    estimator: ComplexityEstimator,
    chunker: Chunker,
    budget: BudgetState,
    schedule: Schedule,
    signals: Vec<ComplexitySignals>,
    mixes: Vec<AdapterMix>,
    chunk_log: Vec<ChunkRecord>,
    adapter_macs: u64,
}

impl<'r> DecodeStream<'r> {
    fn new(rt: &'r Runtime) -> Result<Self> {
        let initial = rt.table.setting(rt.table.n_bands() / 2);
        Ok(Self {
            rt,
            cache: KvStore::new(rt.kv),
            estimator: ComplexityEstimator::new(rt.cfg.estimator.clone())?,
            chunker: Chunker::new(rt.chunker.clone())?,
            budget: BudgetState::new(rt.chunker.budget_high),
            schedule: Schedule {
                current: initial,
                outgoing: None,
                boundary: 0,
                window: rt.chunker.crossfade_window,
            },
            signals: Vec::new(),
            mixes: Vec::new(),
            chunk_log: Vec::new(),
            adapter_macs: 0,
        })
    }

    /// Tokens fed so far.
    pub fn position(&self) -> usize {
        self.cache.len()
    }

    pub fn running_mean(&self) -> Option<f64> {
        self.chunker.running_mean()
    }

    pub fn signals(&self) -> &[ComplexitySignals] {
        &self.signals
    }

    pub fn mixes(&self) -> &[AdapterMix] {
        &self.mixes
    }

    pub fn chunk_log(&self) -> &[ChunkRecord] {
        &self.chunk_log
    }

    pub fn cache(&self) -> &KvStore {
        &self.cache
    }

    pub fn adapter_macs(&self) -> u64 {
        self.adapter_macs
    }

    /// Runs `token` at the next position under the current schedule, scores
    /// it, and closes a chunk if the chunker says so.
    pub fn step(&mut self, token: u8) -> Result<StepOutput> {
        let pos = self.position();
        let mix = self.schedule.mix(pos);
        let adapters = ActiveAdapterSet::uniform(&self.rt.bank, mix);
        let out = self
            .rt
            .model
            .forward_step(token as usize, &mut self.cache, &adapters)
            .map_err(|e| e.at_step(pos))?;
        let sig = self
            .estimator
            .observe(token, &out.logits, out.last_layer_attn())
            .map_err(|e| e.at_step(pos))?;
        self.signals.push(sig);
        self.mixes.push(mix);
        self.adapter_macs += out.adapter_macs;
        if let Some(chunk) = self.chunker.observe(sig.combined) {
            self.close_chunk(chunk, true).map_err(|e| e.at_step(pos))?;
        }
        Ok(out)
    }

    fn close_chunk(&mut self, chunk: Chunk, plan_next: bool) -> Result<()> {
        let plan = self.rt.table.select(&chunk, &mut self.budget);
        self.cache
            .seal_span(chunk.start..chunk.end, plan.cache_policy)?;
        let faded_in = self.schedule.outgoing.is_some() && self.schedule.boundary == chunk.start;
        self.chunk_log.push(ChunkRecord {
            start: chunk.start,
            end: chunk.end,
            mean_complexity: chunk.mean_complexity,
            class: chunk.class,
            band: plan.band,
            rank: plan.setting.rank,
            scale: plan.setting.scale,
            cache_policy: plan.cache_policy,
            demoted: plan.demoted,
            applied_rank: self.schedule.current.rank,
            applied_scale: self.schedule.current.scale,
            faded_in,
            plan_applies_from: plan_next.then_some(chunk.end),
        });
        if plan_next {
            self.schedule.switch(plan.setting, chunk.end);
        }
        Ok(())
    }

    /// Closes the open chunk and builds the report.
    pub fn finish(
        mut self,
        tokens_generated: usize,
        elapsed_ms: f64,
        perplexity: Option<f64>,
    ) -> Result<MetricsReport> {
        let pos = self.position();
        if let Some(chunk) = self.chunker.flush() {
            self.close_chunk(chunk, false).map_err(|e| e.at_step(pos))?;
        }
        Ok(MetricsReport {
            tokens_generated,
            ms_per_token: if tokens_generated > 0 {
                elapsed_ms / tokens_generated as f64
            } else {
                0.0
            },
            adapter_macs: self.adapter_macs,
            peak_cache_bytes: self.cache.peak_bytes(),
            perplexity,
            chunk_log: self.chunk_log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::ModelConfig;

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            d_ff: 64,
            max_seq: 128,
            ..Default::default()
        }
    }

    fn runtime(text: &str) -> Runtime {
        let mut cfg = RunConfig::parse(text).unwrap();
        cfg.model = ModelSource::Seed(small_model());
        Runtime::prepare(cfg).unwrap()
    }

    #[test]
    fn schedule_fades_linearly() {
        let a = ChunkAdapterSetting::new(4, 0.5).unwrap();
        let b = ChunkAdapterSetting::new(16, 1.0).unwrap();
        let mut s = Schedule {
            current: a,
            outgoing: None,
            boundary: 0,
            window: 4,
        };
        s.switch(b, 10);
        assert_eq!(s.mix(9), AdapterMix::Single(b));
        for (t, lam) in [(10, 1.0), (11, 0.75), (12, 0.5), (13, 0.25)] {
            assert_eq!(
                s.mix(t),
                AdapterMix::Blend {
                    outgoing: a,
                    incoming: b,
                    lambda: lam
                }
            );
        }
        assert_eq!(s.mix(14), AdapterMix::Single(b));
        s.switch(b, 20);
        assert_eq!(s.mix(20), AdapterMix::Single(b));
    }

    #[test]
    fn chunk_log_tiles_forced_trace() {
        let rt = runtime("chunker.tau = 0.6\npolicy.band_edges = 0.55,0.65\ndecode.length = 4\n");
        let text = &bimodal_corpus(&CorpusSpec {
            seed: 5,
            sequences: 1,
            length: 96,
        })[0];
        let run = rt.run_forced(text).unwrap();
        let log = &run.report.chunk_log;
        assert_eq!(log[0].start, 0);
        assert_eq!(log.last().unwrap().end, 96);
        assert!(log.windows(2).all(|w| w[0].end == w[1].start));
        assert_eq!(run.nll.len(), 95);
        assert_eq!(run.mixes.len(), 96);
        assert_eq!((log[0].applied_rank, log[0].applied_scale), (8, 0.75));
    }

    #[test]
    fn decode_lengths_and_determinism() {
        let rt = runtime("decode.length = 10\npolicy.band_edges = 0.5,0.7\n");
        let (a, ra) = rt.decode(b"hello world").unwrap();
        let (b, rb) = rt.decode(b"hello world").unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_eq!(ra.without_wall_clock(), rb.without_wall_clock());
        assert_eq!(ra.chunk_log.last().unwrap().end, 11 + 9);
        assert_eq!(ra.tokens_generated, 10);
    }

    #[test]
    fn forced_errors() {
        let rt = runtime("policy.band_edges = 0.5,0.7\n");
        assert!(matches!(rt.run_forced(b"a"), Err(Error::Domain(_))));
        assert!(matches!(rt.decode(b""), Err(Error::Domain(_))));
    }

    #[test]
    fn capacity_error_carries_step() {
        let rt = runtime("policy.band_edges = 0.5,0.7\n");
        let err = rt.run_forced(&[7u8; 129]).unwrap_err();
        match err {
            Error::AtStep { step, source } => {
                assert_eq!(step, 128);
                assert!(matches!(*source, Error::Capacity { .. }));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn calibration_resolves_table_and_tau() {
        let mut cfg =
            RunConfig::parse("calibration.sequences = 2\ncalibration.length = 64\n").unwrap();
        cfg.model = ModelSource::Seed(small_model());
        let rt = Runtime::prepare(cfg).unwrap();
        let edges = rt.table().band_edges();
        assert_eq!(edges.len(), 2);
        assert!(edges[0] <= edges[1]);
        assert_eq!(rt.chunker_config().tau, edges[1]);
    }

    #[test]
    fn bucket_levels_by_band() {
        let t = PolicyTable::with_edges(0.3, 0.6).unwrap();
        assert_eq!(
            bucket_levels(&t, &[0.7, 0.1, 0.35, 0.2, 0.6]),
            vec![vec![1, 3], vec![2], vec![0, 4]]
        );
        assert!(bucket_levels(&t, &[]).is_empty());
    }

    #[test]
    fn bucket_batch_needs_scores() {
        let rt = runtime("policy.band_edges = 0.5,0.7\n");
        let s = rt.stream().unwrap();
        assert!(matches!(
            bucket_batch(rt.table(), &[s]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn nll_matches_uniform() {
        let l = vec![0.0f32; 256];
        assert!((token_nll(&l, 9) - 256f64.ln()).abs() < 1e-12);
    }
}
