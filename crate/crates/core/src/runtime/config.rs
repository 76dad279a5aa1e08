//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Lists are comma-separated. See the README for the key reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapter::{ChunkAdapterSetting, RankSet};
use crate::chunker::ChunkerConfig;
use crate::complexity::EstimatorConfig;
use crate::kvcache::{CachePolicy, DEFAULT_SINKS};
use crate::policy::{default_cache_policies, PolicyTable, DEFAULT_RANKS, DEFAULT_SCALES};
use crate::runtime::corpus::CorpusSpec;
use crate::toymodel::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    Chunkwise,
    /// One `(rank, scale)` everywhere with a full-precision cache.
    Static(ChunkAdapterSetting),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Seed(ModelConfig),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterSource {
    /// One synthesized adapter per site, seeded from `seed` and the site.
    Seed {
        seed: u64,
        r_max: usize,
    },
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Synthetic(CorpusSpec),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelSource,
    pub adapters: AdapterSource,
    pub allowed_ranks: RankSet,
    pub allow_rank_zero: bool,
    pub estimator: EstimatorConfig,
    pub chunker: ChunkerConfig,
    /// `None` takes tau from calibration (the upper band edge).
    pub tau: Option<f64>,
    /// `None` calibrates from `calibration`.
    pub policy: Option<PolicyTable>,
    pub calibration: CorpusSource,
    pub sinks: usize,
    pub decode_length: usize,
    pub prompt_file: Option<PathBuf>,
    pub prompt_text: Option<String>,
    pub corpus: CorpusSource,
    pub metrics_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Chunkwise,
            model: ModelSource::Seed(ModelConfig::default()),
            adapters: AdapterSource::Seed { seed: 7, r_max: 16 },
            allowed_ranks: RankSet::default(),
            allow_rank_zero: false,
            estimator: EstimatorConfig::default(),
            chunker: ChunkerConfig::default(),
            tau: None,
            policy: None,
            calibration: CorpusSource::Synthetic(CorpusSpec::validation()),
            sinks: DEFAULT_SINKS,
            decode_length: 256,
            prompt_file: None,
            prompt_text: None,
            corpus: CorpusSource::Synthetic(CorpusSpec::default()),
            metrics_path: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Default)]
struct PolicyKeys {
    edges: Option<Vec<f64>>,
    ranks: Option<Vec<usize>>,
    scales: Option<Vec<f64>>,
    cache: Option<Vec<CachePolicy>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with_base(&text, base)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Path::new("."))
    }

    /// Relative paths in the text resolve against `base`.
    pub fn parse_with_base(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut model = ModelConfig::default();
        let mut model_file = None;
        let mut adapter_seed = 7u64;
        let mut r_max = 16usize;
        let mut adapter_files: Option<Vec<PathBuf>> = None;
        let mut static_rank = 16usize;
        let mut static_scale = 1.0f64;
        let mut mode = "chunkwise".to_string();
        let mut pk = PolicyKeys::default();
        let mut calib = CorpusSpec::validation();
        let mut calib_file = None;
        let mut corpus = CorpusSpec::default();
        let mut corpus_file = None;
        let path = |v: &str| base.join(v.trim());

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            match key {
                "mode" => mode = v.trim().to_string(),
                "static.rank" => static_rank = parse(key, v)?,
                "static.scale" => static_scale = parse(key, v)?,
                "model.file" => model_file = Some(path(v)),
                "model.seed" => model.seed = parse(key, v)?,
                "model.vocab_size" => model.vocab_size = parse(key, v)?,
                "model.d_model" => model.d_model = parse(key, v)?,
                "model.n_heads" => model.n_heads = parse(key, v)?,
                "model.n_layers" => model.n_layers = parse(key, v)?,
                "model.d_ff" => model.d_ff = parse(key, v)?,
                "model.max_seq" => model.max_seq = parse(key, v)?,
                "adapter.files" => {
                    adapter_files = Some(
                        v.split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(path)
                            .collect(),
                    )
                }
                "adapter.seed" => adapter_seed = parse(key, v)?,
                "adapter.r_max" => r_max = parse(key, v)?,
                "adapter.allowed_ranks" => cfg.allowed_ranks = RankSet::new(parse_list(key, v)?)?,
                "adapter.allow_rank_zero" => cfg.allow_rank_zero = parse(key, v)?,
                "estimator.weights" => {
                    let w: Vec<f64> = parse_list(key, v)?;
                    cfg.estimator.weights = w.try_into().map_err(|_| {
                        Error::Config("estimator.weights needs exactly 4 values".into())
                    })?;
                }
                "estimator.ngram_order" => cfg.estimator.ngram_order = parse(key, v)?,
                "estimator.novelty_window" => cfg.estimator.novelty_window = parse(key, v)?,
                "estimator.prior_timescale" => cfg.estimator.prior_timescale = parse(key, v)?,
                "chunker.l_min" => cfg.chunker.l_min = parse(key, v)?,
                "chunker.l_max" => cfg.chunker.l_max = parse(key, v)?,
                "chunker.tau" => cfg.tau = Some(parse(key, v)?),
                "chunker.hysteresis" => cfg.chunker.hysteresis = parse(key, v)?,
                "chunker.budget_high" => cfg.chunker.budget_high = parse(key, v)?,
                "chunker.crossfade_window" => cfg.chunker.crossfade_window = parse(key, v)?,
                "policy.band_edges" => pk.edges = Some(parse_list(key, v)?),
                "policy.ranks" => pk.ranks = Some(parse_list(key, v)?),
                "policy.scales" => pk.scales = Some(parse_list(key, v)?),
                "policy.cache" => pk.cache = Some(parse_list(key, v)?),
                "calibration.file" => calib_file = Some(path(v)),
                "calibration.seed" => calib.seed = parse(key, v)?,
                "calibration.sequences" => calib.sequences = parse(key, v)?,
                "calibration.length" => calib.length = parse(key, v)?,
                "kv.sinks" => cfg.sinks = parse(key, v)?,
                "decode.length" => cfg.decode_length = parse(key, v)?,
                "prompt.file" => cfg.prompt_file = Some(path(v)),
                "prompt.text" => cfg.prompt_text = Some(v.trim().to_string()),
                "corpus.file" => corpus_file = Some(path(v)),
                "corpus.seed" => corpus.seed = parse(key, v)?,
                "corpus.sequences" => corpus.sequences = parse(key, v)?,
                "corpus.length" => corpus.length = parse(key, v)?,
                "metrics.path" => cfg.metrics_path = Some(path(v)),
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }

        cfg.mode = match mode.as_str() {
            "chunkwise" => Mode::Chunkwise,
            "static" => Mode::Static(ChunkAdapterSetting::new(static_rank, static_scale)?),
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        };
        cfg.model = match model_file {
            Some(p) => ModelSource::File(p),
            None => ModelSource::Seed(model),
        };
        cfg.adapters = match adapter_files {
            Some(files) => AdapterSource::Files(files),
            None => AdapterSource::Seed {
                seed: adapter_seed,
                r_max,
            },
        };
        cfg.policy = match pk.edges {
            Some(edges) => {
                let n = edges.len() + 1;
                fn pick<T>(
                    given: Option<Vec<T>>,
                    default: Vec<T>,
                    n: usize,
                    what: &str,
                ) -> Result<Vec<T>> {
                    match given {
                        Some(v) => Ok(v),
                        None if n == 3 => Ok(default),
                        None => Err(Error::Config(format!(
                            "policy.{what} required for a {n}-band table"
                        ))),
                    }
                }
                Some(PolicyTable::new(
                    edges,
                    pick(pk.ranks, DEFAULT_RANKS.to_vec(), n, "ranks")?,
                    pick(pk.scales, DEFAULT_SCALES.to_vec(), n, "scales")?,
                    pick(pk.cache, default_cache_policies(), n, "cache")?,
                )?)
            }
            None if pk.ranks.is_some() || pk.scales.is_some() || pk.cache.is_some() => {
                return Err(Error::Config(
                    "policy.* keys need policy.band_edges (empty for one band)".into(),
                ))
            }
            None => None,
        };
        cfg.calibration = match calib_file {
            Some(p) => CorpusSource::File(p),
            None => CorpusSource::Synthetic(calib),
        };
        cfg.corpus = match corpus_file {
            Some(p) => CorpusSource::File(p),
            None => CorpusSource::Synthetic(corpus),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Static consistency checks that do not need loaded files.
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        let mut chunker = self.chunker.clone();
        if let Some(t) = self.tau {
            chunker.tau = t;
        }
        chunker.validate()?;
        if let ModelSource::Seed(m) = &self.model {
            m.validate()?;
        }
        if let AdapterSource::Seed { r_max, .. } = self.adapters {
            if r_max < self.allowed_ranks.max() {
                return Err(Error::Config(format!(
                    "adapter.r_max {r_max} below the largest allowed rank {}",
                    self.allowed_ranks.max()
                )));
            }
        }
        if let Some(table) = &self.policy {
            table.check_ranks(&self.allowed_ranks, self.allow_rank_zero)?;
            for p in table.cache_policies() {
                p.validate(self.chunker.crossfade_window)?;
            }
        }
        if let Mode::Static(s) = self.mode {
            if !(s.rank == 0 && self.allow_rank_zero) && !self.allowed_ranks.contains(s.rank) {
                return Err(Error::Config(format!(
                    "static rank {} not in allowed ranks {:?}",
                    s.rank,
                    self.allowed_ranks.ranks()
                )));
            }
        }
        if self.decode_length == 0 {
            return Err(Error::Config("decode.length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Config lines for a policy table and chunker threshold, as written by the
/// `calibrate` command.
pub fn policy_section(table: &PolicyTable, tau: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "policy.band_edges = {}", join(table.band_edges()));
    let _ = writeln!(s, "policy.ranks = {}", join(table.ranks()));
    let _ = writeln!(s, "policy.scales = {}", join(table.scales()));
    let _ = writeln!(s, "policy.cache = {}", join(table.cache_policies()));
    let _ = writeln!(s, "chunker.tau = {tau}");
    s
}
