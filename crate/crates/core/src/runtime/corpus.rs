//! Seeded bimodal byte corpus and its hex-per-line file format.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const MOTIF_LEN: usize = 8;
/// Low-complexity span: the motif repeated four times.
pub const MOTIF_SPAN: usize = 32;
pub const RANDOM_SPAN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub sequences: usize,
    pub length: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            sequences: 1000,
            length: 256,
        }
    }
}

impl CorpusSpec {
    /// Held-out set used for percentile calibration.
    pub fn validation() -> Self {
        Self {
            seed: 2,
            sequences: 16,
            length: 256,
        }
    }
}

/// Sequences alternating a repeated 8-byte motif span (32 bytes) with a
/// uniform random span (16 bytes), motif first. Each sequence draws its own
/// motif.
pub fn bimodal_corpus(spec: &CorpusSpec) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.sequences)
        .map(|_| {
            let motif: [u8; MOTIF_LEN] = rng.random();
            let mut seq = Vec::with_capacity(spec.length + RANDOM_SPAN);
            while seq.len() < spec.length {
                for _ in 0..MOTIF_SPAN / MOTIF_LEN {
                    seq.extend_from_slice(&motif);
                }
                seq.extend((0..RANDOM_SPAN).map(|_| rng.random::<u8>()));
            }
            seq.truncate(spec.length);
            seq
        })
        .collect()
}

pub fn write_corpus(seqs: &[Vec<u8>], w: &mut impl Write) -> Result<()> {
    for s in seqs {
        writeln!(w, "{}", hex::encode(s))?;
    }
    Ok(())
}

/// One hex-encoded sequence per line; blank lines are skipped.
pub fn read_corpus(r: impl Read) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            hex::decode(line).map_err(|e| Error::Format(format!("corpus line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    read_corpus(std::fs::File::open(path)?)
}

pub fn save_corpus(seqs: &[Vec<u8>], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(seqs, &mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_alternates_motif_and_noise() {
        let spec = CorpusSpec {
            seed: 3,
            sequences: 4,
            length: 100,
        };
        let c = bimodal_corpus(&spec);
        assert_eq!(c.len(), 4);
        for s in &c {
            assert_eq!(s.len(), 100);
            let motif = &s[..MOTIF_LEN];
            for block in [0, 48] {
                for rep in 0..4 {
                    let at = block + rep * MOTIF_LEN;
                    assert_eq!(&s[at..at + MOTIF_LEN], motif);
                }
            }
            assert_eq!(&s[96..100], &motif[..4]);
        }
        assert_ne!(c[0][..8], c[1][..8]);
    }

    #[test]
    fn seeded_and_round_trips() {
        let spec = CorpusSpec {
            seed: 9,
            sequences: 3,
            length: 50,
        };
        let a = bimodal_corpus(&spec);
        assert_eq!(a, bimodal_corpus(&spec));
        let mut buf = Vec::new();
        write_corpus(&a, &mut buf).unwrap();
        assert_eq!(read_corpus(&buf[..]).unwrap(), a);
    }

    #[test]
    fn bad_hex_is_a_format_error() {
        let err = read_corpus(&b"00ff\nzz\n"[..]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
