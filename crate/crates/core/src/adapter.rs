//! LoRA adapters, SVD rank ladders and boundary cross-fades.
//!
//! A trained update `ΔW = up · down` is factored once into `U diag(σ) Vᵀ`.
//! Running at effective rank `r` means using the leading `r` singular
//! directions; the truncations are nested, so switching rank is an index
//! operation over the stored factors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix, Scalar, SvdResult};
use crate::{Error, Result};

pub const DEFAULT_ALLOWED_RANKS: [usize; 3] = [4, 8, 16];

/// Leading singular value of synthesized adapters.
pub const SYNTH_SIGMA_MAX: f64 = 0.5;
/// Geometric decay of the synthesized spectrum.
pub const SYNTH_DECAY: f64 = 0.85;

/// Projection an adapter attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 6] = [
        ProjKind::Query,
        ProjKind::Key,
        ProjKind::Value,
        ProjKind::Output,
        ProjKind::Up,
        ProjKind::Down,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown projection code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Query => "q",
            ProjKind::Key => "k",
            ProjKind::Value => "v",
            ProjKind::Output => "o",
            ProjKind::Up => "up",
            ProjKind::Down => "down",
        }
    }
}

/// Adapter attachment point: one projection in one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub kind: ProjKind,
}

impl Site {
    pub fn new(layer: usize, kind: ProjKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind.name())
    }
}

/// Rank and gating scale active for one chunk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkAdapterSetting {
    pub rank: usize,
    pub scale: f64,
}

impl ChunkAdapterSetting {
    pub fn new(rank: usize, scale: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::Policy(format!("scale {scale} outside [0, 1]")));
        }
        Ok(Self { rank, scale })
    }

    pub const OFF: ChunkAdapterSetting = ChunkAdapterSetting {
        rank: 0,
        scale: 0.0,
    };

    pub fn is_off(&self) -> bool {
        self.rank == 0 || self.scale == 0.0
    }
}

/// Trained low-rank update for one site, `ΔW = up · down`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub site: Site,
    /// The A factor, `r_max × d_in`.
    pub down: Matrix<T>,
    /// The B factor, `d_out × r_max`.
    pub up: Matrix<T>,
    pub trained_rank: usize,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(site: Site, down: Matrix<T>, up: Matrix<T>) -> Result<Self> {
        let r = down.rows();
        if up.cols() != r {
            return Err(Error::Shape(format!(
                "adapter {site}: up is {:?} but down has {r} rows",
                up.shape()
            )));
        }
        if r == 0 || r > up.rows().min(down.cols()) {
            return Err(Error::Range(format!(
                "adapter {site}: rank {r} not in 1..={}",
                up.rows().min(down.cols())
            )));
        }
        Ok(Self {
            site,
            down,
            up,
            trained_rank: r,
        })
    }

    pub fn d_in(&self) -> usize {
        self.down.cols()
    }

    pub fn d_out(&self) -> usize {
        self.up.rows()
    }

    pub fn delta(&self) -> Matrix<T> {
        linalg::matmul(&self.up, &self.down).expect("factor shapes checked at construction")
    }
}

/// Seeded stand-in for a trained adapter with a strictly decaying spectrum
/// `σᵢ = 0.5 · 0.85ⁱ`.
///
/// Factor entries are rounded to f32 so the adapter survives a round trip
/// through the on-disk format unchanged.
pub fn synthesize_adapter(
    site: Site,
    d_out: usize,
    d_in: usize,
    r_max: usize,
    seed: u64,
) -> Result<LoraAdapter<f64>> {
    if r_max == 0 || r_max > d_out.min(d_in) {
        return Err(Error::Range(format!(
            "r_max {r_max} must be in 1..={} for a {d_out}x{d_in} site",
            d_out.min(d_in)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = random_orthonormal(d_out, r_max, &mut rng);
    let right = random_orthonormal(d_in, r_max, &mut rng);
    let root: Vec<f64> = (0..r_max)
        .map(|i| (SYNTH_SIGMA_MAX * SYNTH_DECAY.powi(i as i32)).sqrt())
        .collect();
    let round = |v: f64| v as f32 as f64;
    let up = Matrix::from_fn(d_out, r_max, |i, j| round(left[j][i] * root[j]));
    let down = Matrix::from_fn(r_max, d_in, |i, j| round(right[i][j] * root[i]));
    LoraAdapter::new(site, down, up)
}

fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &cols {
                let p = linalg::dot(&c, b);
                c.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
            }
        }
        let len = linalg::norm2(&c);
        if len > 1e-6 {
            c.iter_mut().for_each(|x| *x /= len);
            cols.push(c);
        }
    }
    cols
}

/// Ranks a ladder may be sliced at.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSet {
    ranks: Vec<usize>,
}

impl RankSet {
    pub fn new(mut ranks: Vec<usize>) -> Result<Self> {
        ranks.sort_unstable();
        ranks.dedup();
        if ranks.is_empty() || ranks[0] == 0 {
            return Err(Error::Config(
                "allowed ranks must be a non-empty set of positive counts".into(),
            ));
        }
        Ok(Self { ranks })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn max(&self) -> usize {
        *self.ranks.last().expect("non-empty")
    }

    pub fn contains(&self, r: usize) -> bool {
        self.ranks.binary_search(&r).is_ok()
    }
}

impl Default for RankSet {
    fn default() -> Self {
        Self {
            ranks: DEFAULT_ALLOWED_RANKS.to_vec(),
        }
    }
}

/// SVD of one site's `ΔW`, sliceable to any allowed rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RankLadder<T> {
    pub site: Site,
    svd: SvdResult<T>,
    allowed: RankSet,
}

pub fn build_rank_ladder<T: Scalar>(
    adapter: &LoraAdapter<T>,
    allowed: &RankSet,
) -> Result<RankLadder<T>> {
    let svd = linalg::svd(&adapter.delta())?;
    if allowed.max() > svd.sigma.len() {
        return Err(Error::Range(format!(
            "allowed rank {} exceeds the {} singular values of {}",
            allowed.max(),
            svd.sigma.len(),
            adapter.site
        )));
    }
    Ok(RankLadder {
        site: adapter.site,
        svd,
        allowed: allowed.clone(),
    })
}

impl<T: Scalar> RankLadder<T> {
    pub fn sigma(&self) -> &[T] {
        &self.svd.sigma
    }

    pub fn svd(&self) -> &SvdResult<T> {
        &self.svd
    }

    pub fn allowed(&self) -> &RankSet {
        &self.allowed
    }

    pub fn d_in(&self) -> usize {
        self.svd.v.rows()
    }

    pub fn d_out(&self) -> usize {
        self.svd.u.rows()
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r == 0 || self.allowed.contains(r) {
            Ok(())
        } else {
            Err(Error::Policy(format!(
                "rank {r} not in allowed set {:?} for {}",
                self.allowed.ranks(),
                self.site
            )))
        }
    }

    /// Multiply-accumulates modeled for one application at rank `r`.
    pub fn macs(&self, r: usize) -> u64 {
        2 * (r * (self.d_in() + self.d_out())) as u64
    }

    /// `α · U_r diag(σ_r) V_rᵀ x`, computed through the factors.
    pub fn apply(&self, setting: ChunkAdapterSetting, x: &[T]) -> Result<Vec<T>> {
        self.check_rank(setting.rank)?;
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "{}: input length {} but d_in is {}",
                self.site,
                x.len(),
                self.d_in()
            )));
        }
        let d_out = self.d_out();
        if setting.is_off() {
            return Ok(vec![T::zero(); d_out]);
        }
        let r = setting.rank;
        let (u, v) = (&self.svd.u, &self.svd.v);
        let k = self.svd.sigma.len();
        let mut coeff = vec![0.0f64; r];
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi.as_f64();
            let row = &v.data()[i * k..i * k + r];
            for (c, &vij) in coeff.iter_mut().zip(row) {
                *c += vij.as_f64() * xi;
            }
        }
        for (c, &s) in coeff.iter_mut().zip(&self.svd.sigma) {
            *c *= s.as_f64() * setting.scale;
        }
        Ok((0..d_out)
            .map(|i| {
                let row = &u.data()[i * k..i * k + r];
                T::of(row.iter().zip(&coeff).map(|(&a, &c)| a.as_f64() * c).sum())
            })
            .collect())
    }

    /// `λ · apply(outgoing, x) + (1 − λ) · apply(incoming, x)`.
    pub fn blend_apply(
        &self,
        outgoing: ChunkAdapterSetting,
        incoming: ChunkAdapterSetting,
        lambda: f64,
        x: &[T],
    ) -> Result<Vec<T>> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Domain(format!(
                "blend weight {lambda} outside [0, 1]"
            )));
        }
        let a = self.apply(outgoing, x)?;
        let b = self.apply(incoming, x)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(&a, &b)| T::of(lambda * a.as_f64() + (1.0 - lambda) * b.as_f64()))
            .collect())
    }

    /// Frobenius norm of the discarded tail, `sqrt(Σ_{i≥r} σᵢ²)`.
    pub fn linearization_error(&self, r: usize) -> Result<f64> {
        let k = self.svd.sigma.len();
        if r > k {
            return Err(Error::Range(format!(
                "rank {r} exceeds {k} singular values"
            )));
        }
        Ok(self.svd.sigma[r..]
            .iter()
            .rev()
            .map(|s| s.as_f64() * s.as_f64())
            .sum::<f64>()
            .sqrt())
    }

    /// Dense rank-`r` truncation. Tests and offline merging only; the decode
    /// path never materializes it.
    pub fn slice_dense(&self, r: usize) -> Result<Matrix<T>> {
        linalg::truncated_reconstruct(&self.svd, r)
    }
}

/// How the adapter path is driven for one token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdapterMix {
    Single(ChunkAdapterSetting),
    /// Cross-fade: `lambda` weights the outgoing setting.
    Blend {
        outgoing: ChunkAdapterSetting,
        incoming: ChunkAdapterSetting,
        lambda: f64,
    },
}

impl AdapterMix {
    pub fn is_off(&self) -> bool {
        match self {
            AdapterMix::Single(s) => s.is_off(),
            AdapterMix::Blend {
                outgoing, incoming, ..
            } => outgoing.is_off() && incoming.is_off(),
        }
    }

    /// `None` when the mix contributes nothing, so callers can leave the
    /// frozen output untouched.
    pub fn apply<T: Scalar>(&self, ladder: &RankLadder<T>, x: &[T]) -> Result<Option<Vec<T>>> {
        if self.is_off() {
            return Ok(None);
        }
        match *self {
            AdapterMix::Single(s) => ladder.apply(s, x).map(Some),
            AdapterMix::Blend {
                outgoing,
                incoming,
                lambda,
            } => ladder.blend_apply(outgoing, incoming, lambda, x).map(Some),
        }
    }

    pub fn macs<T: Scalar>(&self, ladder: &RankLadder<T>) -> u64 {
        let cost = |s: &ChunkAdapterSetting| if s.is_off() { 0 } else { ladder.macs(s.rank) };
        match self {
            AdapterMix::Single(s) => cost(s),
            AdapterMix::Blend {
                outgoing, incoming, ..
            } => cost(outgoing) + cost(incoming),
        }
    }
}

/// All ladders of a session, built once per site.
#[derive(Clone, Debug, Default)]
pub struct AdapterBank<T> {
    ladders: BTreeMap<Site, RankLadder<T>>,
}

impl<T: Scalar> AdapterBank<T> {
    pub fn build(adapters: &[LoraAdapter<T>], allowed: &RankSet) -> Result<Self> {
        let mut ladders = BTreeMap::new();
        for a in adapters {
            if ladders.contains_key(&a.site) {
                return Err(Error::Config(format!("duplicate adapter for {}", a.site)));
            }
            ladders.insert(a.site, build_rank_ladder(a, allowed)?);
        }
        Ok(Self { ladders })
    }

    pub fn empty() -> Self {
        Self {
            ladders: BTreeMap::new(),
        }
    }

    pub fn get(&self, site: Site) -> Option<&RankLadder<T>> {
        self.ladders.get(&site)
    }

    pub fn ladders(&self) -> impl Iterator<Item = &RankLadder<T>> {
        self.ladders.values()
    }

    pub fn len(&self) -> usize {
        self.ladders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ladders.is_empty()
    }
}

// On-disk format, little-endian:
//   "CWLA" | version u32 | layer u32 | kind u32 | d_out u32 | d_in u32 |
//   r_max u32 | down (r_max*d_in f32) | up (d_out*r_max f32)
const ADAPTER_MAGIC: &[u8; 4] = b"CWLA";
const ADAPTER_VERSION: u32 = 1;

pub fn write_adapter<T: Scalar>(a: &LoraAdapter<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(ADAPTER_MAGIC)?;
    for v in [
        ADAPTER_VERSION,
        a.site.layer as u32,
        a.site.kind.code(),
        a.d_out() as u32,
        a.d_in() as u32,
        a.trained_rank as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for m in [&a.down, &a.up] {
        for &x in m.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_adapter(r: &mut impl Read) -> Result<LoraAdapter<f64>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != ADAPTER_MAGIC {
        return Err(Error::Format("bad adapter magic".into()));
    }
    let version = read_u32(r)?;
    if version != ADAPTER_VERSION {
        return Err(Error::Format(format!(
            "unsupported adapter version {version}"
        )));
    }
    let layer = read_u32(r)? as usize;
    let kind = ProjKind::from_code(read_u32(r)?)?;
    let d_out = read_u32(r)? as usize;
    let d_in = read_u32(r)? as usize;
    let r_max = read_u32(r)? as usize;
    let site = Site::new(layer, kind);
    let down = Matrix::new(r_max, d_in, read_f32s(r, r_max * d_in)?)
        .map_err(|e| Error::Format(format!("adapter down factor: {e}")))?;
    let up = Matrix::new(d_out, r_max, read_f32s(r, d_out * r_max)?)
        .map_err(|e| Error::Format(format!("adapter up factor: {e}")))?;
    LoraAdapter::new(site, down, up).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_adapter(a: &LoraAdapter<f64>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_adapter(a, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter<f64>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_adapter(&mut f)
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

impl FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection `{s}`")))
    }
}
