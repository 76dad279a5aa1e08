//! Run metrics and their line-delimited JSON encoding.
//!
//! Each chunk record carries two settings: the plan chosen from the chunk
//! itself (`rank`, `scale`, also sealing its cache span) and the setting that
//! actually ran over it (`applied_*`), which lags by one chunk.
//!
//! A report is written as one `"record": "chunk"` line per chunk followed by
//! one `"record": "summary"` line. `ms_per_token` is the only wall-clock field.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chunker::ChunkClass;
use crate::kvcache::CachePolicy;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub start: usize,
    pub end: usize,
    pub mean_complexity: f64,
    pub class: ChunkClass,
    pub band: usize,
    pub rank: usize,
    pub scale: f64,
    pub cache_policy: CachePolicy,
    pub demoted: bool,
    /// Setting that governed this chunk's tokens (chosen from the previous
    /// chunk).
    pub applied_rank: usize,
    pub applied_scale: f64,
    /// Whether the chunk opened with a cross-fade from an earlier setting.
    pub faded_in: bool,
    /// First position governed by this chunk's plan; `None` for the last
    /// chunk of a stream.
    pub plan_applies_from: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tokens_generated: usize,
    pub ms_per_token: f64,
    pub adapter_macs: u64,
    pub peak_cache_bytes: usize,
    pub perplexity: Option<f64>,
    pub chunk_log: Vec<ChunkRecord>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line<'a> {
    Chunk(&'a ChunkRecord),
    Summary {
        tokens_generated: usize,
        ms_per_token: f64,
        adapter_macs: u64,
        peak_cache_bytes: usize,
        perplexity: Option<f64>,
        chunks: usize,
    },
}

impl MetricsReport {
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for c in &self.chunk_log {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&Line::Chunk(c)).expect("serializable")
            )?;
        }
        let summary = Line::Summary {
            tokens_generated: self.tokens_generated,
            ms_per_token: self.ms_per_token,
            adapter_macs: self.adapter_macs,
            peak_cache_bytes: self.peak_cache_bytes,
            perplexity: self.perplexity,
            chunks: self.chunk_log.len(),
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&summary).expect("serializable")
        )?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Same report with wall-clock fields zeroed.
    pub fn without_wall_clock(&self) -> Self {
        Self {
            ms_per_token: 0.0,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_line_per_chunk_plus_summary() {
        let rec = ChunkRecord {
            start: 0,
            end: 8,
            mean_complexity: 0.25,
            class: ChunkClass::Low,
            band: 0,
            rank: 4,
            scale: 0.5,
            cache_policy: CachePolicy::int8_window(64),
            demoted: false,
            applied_rank: 8,
            applied_scale: 0.75,
            faded_in: false,
            plan_applies_from: Some(8),
        };
        let r = MetricsReport {
            tokens_generated: 8,
            ms_per_token: 1.5,
            adapter_macs: 100,
            peak_cache_bytes: 64,
            perplexity: Some(3.0),
            chunk_log: vec![
                rec.clone(),
                ChunkRecord {
                    start: 8,
                    end: 9,
                    ..rec
                },
            ],
        };
        let text = r.to_jsonl();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["record"], "chunk");
        assert_eq!(lines[0]["cache_policy"], "int8+window(64)");
        assert_eq!(lines[0]["class"], "low");
        assert_eq!(lines[2]["record"], "summary");
        assert_eq!(lines[2]["chunks"], 2);
        assert_eq!(lines[2]["adapter_macs"], 100);
    }
}
