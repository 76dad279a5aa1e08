//! Small deterministic byte-level decoder.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention over
//! an external [`KvStore`], a SiLU MLP, and learned absolute position
//! embeddings. Activations are f32; reductions accumulate in f64. Adapter
//! contributions are added to the outputs of the frozen projections.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{read_exact, read_f32s, read_u32, AdapterBank, AdapterMix, ProjKind, Site};
use crate::kvcache::{KvConfig, KvStore, DEFAULT_SINKS};
use crate::linalg::Matrix;
use crate::{Error, Result};

pub const INIT_STD: f32 = 0.02;
const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq: 512,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_seq,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!(
                "model counts must be >= 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(2..=256).contains(&self.vocab_size) {
            return Err(Error::Config(format!(
                "byte-level vocabulary must be 2..=256, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_out, d_in)` of a projection.
    pub fn site_dims(&self, kind: ProjKind) -> (usize, usize) {
        match kind {
            ProjKind::Query | ProjKind::Key | ProjKind::Value | ProjKind::Output => {
                (self.d_model, self.d_model)
            }
            ProjKind::Up => (self.d_ff, self.d_model),
            ProjKind::Down => (self.d_model, self.d_ff),
        }
    }

    pub fn sites(&self) -> Vec<Site> {
        (0..self.n_layers)
            .flat_map(|l| ProjKind::ALL.iter().map(move |&k| Site::new(l, k)))
            .collect()
    }

    pub fn kv_config(&self) -> KvConfig {
        KvConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head(),
            sinks: DEFAULT_SINKS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix<f32>,
    pub wk: Matrix<f32>,
    pub wv: Matrix<f32>,
    pub wo: Matrix<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Matrix<f32>,
    pub w_down: Matrix<f32>,
}

impl LayerWeights {
    pub fn projection(&self, kind: ProjKind) -> &Matrix<f32> {
        match kind {
            ProjKind::Query => &self.wq,
            ProjKind::Key => &self.wk,
            ProjKind::Value => &self.wv,
            ProjKind::Output => &self.wo,
            ProjKind::Up => &self.w_up,
            ProjKind::Down => &self.w_down,
        }
    }

    pub fn projection_mut(&mut self, kind: ProjKind) -> &mut Matrix<f32> {
        match kind {
            ProjKind::Query => &mut self.wq,
            ProjKind::Key => &mut self.wk,
            ProjKind::Value => &mut self.wv,
            ProjKind::Output => &mut self.wo,
            ProjKind::Up => &mut self.w_up,
            ProjKind::Down => &mut self.w_down,
        }
    }
}

/// Frozen weights. Projections are stored `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    pub tok_emb: Matrix<f32>,
    pub pos_emb: Matrix<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix<f32>,
}

/// Draws every matrix from one ChaCha8 stream seeded by `cfg.seed`, as
/// `0.02 · N(0, 1)`, in the order: token embedding, position embedding,
/// per layer (q, k, v, o, up, down), output head. Norm gains start at 1.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32 * INIT_STD
        })
    };
    let d = cfg.d_model;
    let tok_emb = draw(cfg.vocab_size, d);
    let pos_emb = draw(cfg.max_seq, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let wq = draw(d, d);
        let wk = draw(d, d);
        let wv = draw(d, d);
        let wo = draw(d, d);
        let w_up = draw(cfg.d_ff, d);
        let w_down = draw(d, cfg.d_ff);
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq,
            wk,
            wv,
            wo,
            mlp_norm: vec![1.0; d],
            w_up,
            w_down,
        });
    }
    let lm_head = draw(cfg.vocab_size, d);
    Ok(ModelWeights {
        cfg: *cfg,
        tok_emb,
        pos_emb,
        layers,
        final_norm: vec![1.0; d],
        lm_head,
    })
}

/// Which adapter mix drives each site for one step.
#[derive(Clone, Debug)]
pub struct ActiveAdapterSet<'a> {
    bank: Option<&'a AdapterBank<f64>>,
    default_mix: AdapterMix,
    overrides: Vec<(Site, AdapterMix)>,
}

impl<'a> ActiveAdapterSet<'a> {
    /// No adapters: the frozen base model.
    pub fn none() -> Self {
        Self {
            bank: None,
            default_mix: AdapterMix::Single(crate::adapter::ChunkAdapterSetting::OFF),
            overrides: Vec::new(),
        }
    }

    /// Every ladder in `bank` driven by `mix`.
    pub fn uniform(bank: &'a AdapterBank<f64>, mix: AdapterMix) -> Self {
        Self {
            bank: Some(bank),
            default_mix: mix,
            overrides: Vec::new(),
        }
    }

    pub fn with_site(mut self, site: Site, mix: AdapterMix) -> Self {
        self.overrides.retain(|(s, _)| *s != site);
        self.overrides.push((site, mix));
        self
    }

    fn lookup(&self, site: Site) -> Option<(&'a crate::adapter::RankLadder<f64>, AdapterMix)> {
        let ladder = self.bank?.get(site)?;
        let mix = self
            .overrides
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, m)| *m)
            .unwrap_or(self.default_mix);
        Some((ladder, mix))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// `[layer][head][position]` attention of this step's query.
    pub attn_weights: Vec<Vec<Vec<f64>>>,
    /// Modeled adapter multiply-accumulates spent in this step.
    pub adapter_macs: u64,
}

impl StepOutput {
    pub fn last_layer_attn(&self) -> &[Vec<f64>] {
        self.attn_weights.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Callback receiving each adapted site's input vector.
pub type SiteProbe<'p> = &'p mut dyn FnMut(Site, &[f32]);

impl ModelWeights {
    pub fn new_cache(&self) -> KvStore {
        KvStore::new(self.cfg.kv_config())
    }

    pub fn forward_step(
        &self,
        token: usize,
        cache: &mut KvStore,
        adapters: &ActiveAdapterSet<'_>,
    ) -> Result<StepOutput> {
        self.forward_step_probed(token, cache, adapters, None)
    }

    /// Runs one token at position `cache.len()`, appending its keys and
    /// values to `cache`.
    pub fn forward_step_probed(
        &self,
        token: usize,
        cache: &mut KvStore,
        adapters: &ActiveAdapterSet<'_>,
        mut probe: Option<SiteProbe<'_>>,
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let kv = cache.config();
        if kv.n_layers != cfg.n_layers || kv.n_heads != cfg.n_heads || kv.d_head != cfg.d_head() {
            return Err(Error::Shape(format!(
                "cache layout {kv:?} does not match model {cfg:?}"
            )));
        }
        if token >= cfg.vocab_size {
            return Err(Error::Range(format!(
                "token {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let pos = cache.len();
        if pos >= cfg.max_seq {
            return Err(Error::Capacity {
                pos,
                max_seq: cfg.max_seq,
            });
        }
        let dh = cfg.d_head();
        let mut macs = 0u64;
        let mut x: Vec<f32> = self
            .tok_emb
            .row(token)
            .iter()
            .zip(self.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut attn_weights = Vec::with_capacity(cfg.n_layers);

        for (l, lw) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &lw.attn_norm);
            let mut proj = |kind: ProjKind, input: &[f32]| -> Result<Vec<f32>> {
                let site = Site::new(l, kind);
                let mut y = lw.projection(kind).matvec(input)?;
                if let Some((ladder, mix)) = adapters.lookup(site) {
                    if let Some(p) = probe.as_mut() {
                        p(site, input);
                    }
                    let xd: Vec<f64> = input.iter().map(|&v| v as f64).collect();
                    if let Some(delta) = mix.apply(ladder, &xd)? {
                        for (yi, d) in y.iter_mut().zip(delta) {
                            *yi += d as f32;
                        }
                    }
                    macs += mix.macs(ladder);
                }
                Ok(y)
            };
            let q = proj(ProjKind::Query, &h)?;
            let k = proj(ProjKind::Key, &h)?;
            let v = proj(ProjKind::Value, &h)?;
            let mut ctx = vec![0.0f32; cfg.d_model];
            let mut layer_weights = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let r = hd * dh..(hd + 1) * dh;
                cache.append(l, hd, &k[r.clone()], &v[r.clone()])?;
                let att = cache.attend(l, hd, &q[r.clone()], pos)?;
                ctx[r].copy_from_slice(&att.context);
                layer_weights.push(att.weights);
            }
            attn_weights.push(layer_weights);
            let o = proj(ProjKind::Output, &ctx)?;
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let h = rms_norm(&x, &lw.mlp_norm);
            let up = proj(ProjKind::Up, &h)?;
            let act: Vec<f32> = up.iter().map(|&u| silu(u)).collect();
            let down = proj(ProjKind::Down, &act)?;
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        let h = rms_norm(&x, &self.final_norm);
        let logits = self.lm_head.matvec(&h)?;
        Ok(StepOutput {
            logits,
            attn_weights,
            adapter_macs: macs,
        })
    }

    /// Copy with `scale · ΔW` of every ladder (at `rank`) merged into the
    /// frozen projections.
    pub fn merged(&self, bank: &AdapterBank<f64>, rank: usize, scale: f64) -> Result<Self> {
        let mut out = self.clone();
        for ladder in bank.ladders() {
            let delta = ladder.slice_dense(rank)?.scale(scale).cast::<f32>();
            let w = out.layers[ladder.site.layer].projection_mut(ladder.site.kind);
            *w = w.add(&delta)?;
        }
        Ok(out)
    }
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms: f64 = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v as f64 * inv) as f32 * g)
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn greedy(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

// On-disk format, little-endian:
//   "CWLM" | version u32 | vocab, d_model, n_heads, n_layers, d_ff, max_seq
//   as u32 | seed u64 | matrices as f32 row-major in the order tok_emb,
//   pos_emb, per layer (attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down),
//   final_norm, lm_head. Norm gains are 1×d_model rows.
const MODEL_MAGIC: &[u8; 4] = b"CWLM";
const MODEL_VERSION: u32 = 1;

pub fn write_model(m: &ModelWeights, w: &mut impl Write) -> Result<()> {
    let c = &m.cfg;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ff,
        c.max_seq,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    let mut put = |data: &[f32]| -> Result<()> {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    put(m.tok_emb.data())?;
    put(m.pos_emb.data())?;
    for l in &m.layers {
        put(&l.attn_norm)?;
        put(l.wq.data())?;
        put(l.wk.data())?;
        put(l.wv.data())?;
        put(l.wo.data())?;
        put(&l.mlp_norm)?;
        put(l.w_up.data())?;
        put(l.w_down.data())?;
    }
    put(&m.final_norm)?;
    put(m.lm_head.data())?;
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let mut seed = [0u8; 8];
    read_exact(r, &mut seed)?;
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        d_ff: dims[4],
        max_seq: dims[5],
        seed: u64::from_le_bytes(seed),
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let d = cfg.d_model;
    let mut mat = |rows: usize, cols: usize| -> Result<Matrix<f32>> {
        Matrix::new(rows, cols, read_f32s(r, rows * cols)?)
            .map_err(|e| Error::Format(e.to_string()))
    };
    let tok_emb = mat(cfg.vocab_size, d)?;
    let pos_emb = mat(cfg.max_seq, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let attn_norm = mat(1, d)?.data().to_vec();
        let wq = mat(d, d)?;
        let wk = mat(d, d)?;
        let wv = mat(d, d)?;
        let wo = mat(d, d)?;
        let mlp_norm = mat(1, d)?.data().to_vec();
        let w_up = mat(cfg.d_ff, d)?;
        let w_down = mat(d, cfg.d_ff)?;
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_up,
            w_down,
        });
    }
    let final_norm = mat(1, d)?.data().to_vec();
    let lm_head = mat(cfg.vocab_size, d)?;
    Ok(ModelWeights {
        cfg,
        tok_emb,
        pos_emb,
        layers,
        final_norm,
        lm_head,
    })
}

pub fn save_model(m: &ModelWeights, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(m, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}
