//! Side-by-side comparison of run configs on one forced corpus.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::runtime::Runtime;
use crate::{Error, Result};

/// Totals of one config over the corpus, with deltas against the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub label: String,
    pub sequences: usize,
    pub tokens: usize,
    pub ms_per_token: f64,
    pub adapter_macs: u64,
    /// Largest per-sequence peak.
    pub peak_cache_bytes: usize,
    /// Over every prediction in the corpus.
    pub perplexity: f64,
    pub chunks: usize,
    pub demotions: usize,
    pub delta_ms_per_token: f64,
    pub delta_adapter_macs: i128,
    pub delta_peak_cache_bytes: i64,
    pub delta_perplexity: f64,
}

impl BenchEntry {
    pub fn without_wall_clock(&self) -> Self {
        Self {
            ms_per_token: 0.0,
            delta_ms_per_token: 0.0,
            ..self.clone()
        }
    }
}

/// Runs every config over `corpus` with teacher forcing.
pub fn bench(configs: &[(String, Runtime)], corpus: &[Vec<u8>]) -> Result<Vec<BenchEntry>> {
    if configs.len() < 2 {
        return Err(Error::Config(format!(
            "bench needs at least 2 configs, got {}",
            configs.len()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Domain("bench corpus is empty".into()));
    }
    let mut entries: Vec<BenchEntry> = Vec::with_capacity(configs.len());
    for (label, rt) in configs {
        let mut tokens = 0;
        let mut ms = 0.0;
        let mut macs = 0u64;
        let mut peak = 0usize;
        let mut nll = 0.0;
        let mut predictions = 0usize;
        let mut chunks = 0;
        let mut demotions = 0;
        for seq in corpus {
            let run = rt.run_forced(seq)?;
            let r = &run.report;
            tokens += r.tokens_generated;
            ms += r.ms_per_token * r.tokens_generated as f64;
            macs += r.adapter_macs;
            peak = peak.max(r.peak_cache_bytes);
            nll += run.nll.iter().sum::<f64>();
            predictions += run.nll.len();
            chunks += r.chunk_log.len();
            demotions += r.chunk_log.iter().filter(|c| c.demoted).count();
        }
        let mut e = BenchEntry {
            label: label.clone(),
            sequences: corpus.len(),
            tokens,
            ms_per_token: ms / tokens as f64,
            adapter_macs: macs,
            peak_cache_bytes: peak,
            perplexity: (nll / predictions as f64).exp(),
            chunks,
            demotions,
            delta_ms_per_token: 0.0,
            delta_adapter_macs: 0,
            delta_peak_cache_bytes: 0,
            delta_perplexity: 0.0,
        };
        if let Some(base) = entries.first() {
            e.delta_ms_per_token = e.ms_per_token - base.ms_per_token;
            e.delta_adapter_macs = e.adapter_macs as i128 - base.adapter_macs as i128;
            e.delta_peak_cache_bytes = e.peak_cache_bytes as i64 - base.peak_cache_bytes as i64;
            e.delta_perplexity = e.perplexity - base.perplexity;
        }
        entries.push(e);
    }
    Ok(entries)
}

pub fn write_bench_jsonl(entries: &[BenchEntry], w: &mut impl Write) -> Result<()> {
    for e in entries {
        writeln!(w, "{}", serde_json::to_string(e).expect("serializable"))?;
    }
    Ok(())
}
