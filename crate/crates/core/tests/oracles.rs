//! End-to-end checks against independent reference computations.
#![allow(clippy::needless_range_loop)]

use chunkwise_lora::adapter::{AdapterMix, ChunkAdapterSetting};
use chunkwise_lora::kvcache::{quantize_symmetric, CachePolicy, KvConfig, KvStore};
use chunkwise_lora::linalg::{svd, truncated_reconstruct, Matrix};
use chunkwise_lora::runtime::bench::bench;
use chunkwise_lora::runtime::{
    bimodal_corpus, bucket_batch, synthesize_bank_adapters, CorpusSpec, ModelSource, RunConfig,
    Runtime,
};
use chunkwise_lora::toymodel::{init_model, ActiveAdapterSet, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Classical two-sided Jacobi eigenvalues of a symmetric matrix.
fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut a = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    for (seed, (m, n)) in [(1, (9, 5)), (2, (6, 6)), (3, (4, 10)), (4, (20, 3))] {
        let a = random_matrix(m, n, seed);
        let s = svd(&a).unwrap();
        let small = m.min(n);
        // Gram matrix on the smaller side.
        let gram: Vec<Vec<f64>> = (0..small)
            .map(|i| {
                (0..small)
                    .map(|j| {
                        if m >= n {
                            (0..m).map(|k| a.get(k, i) * a.get(k, j)).sum()
                        } else {
                            (0..n).map(|k| a.get(i, k) * a.get(j, k)).sum()
                        }
                    })
                    .collect()
            })
            .collect();
        let ev = symmetric_eigenvalues(&gram);
        for (sig, lam) in s.sigma.iter().zip(&ev) {
            assert!((sig * sig - lam).abs() < 1e-10 * ev[0], "{sig}² vs {lam}");
        }
    }
}

#[test]
fn truncation_error_is_spectral_tail() {
    let a = random_matrix(12, 8, 11);
    let s = svd(&a).unwrap();
    for r in 0..=8 {
        let approx = truncated_reconstruct(&s, r).unwrap();
        let err = a.sub(&approx).unwrap().frobenius_norm();
        let tail: f64 = s.sigma[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-10 * a.frobenius_norm(), "r={r}");
    }
}

fn naive_attention(keys: &[Vec<f32>], values: &[Vec<f32>], q: &[f32]) -> (Vec<f32>, Vec<f64>) {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            q.iter()
                .zip(k)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut ctx = vec![0.0f64; d];
    for (p, v) in w.iter().zip(values) {
        for (c, &x) in ctx.iter_mut().zip(v) {
            *c += p * x as f64;
        }
    }
    (ctx.into_iter().map(|c| c as f32).collect(), w)
}

#[test]
fn full_attend_is_bitwise_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut kv = KvStore::new(KvConfig {
        n_layers: 1,
        n_heads: 1,
        d_head: 8,
        sinks: 4,
    });
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut start = 0;
    for t in 0..40 {
        let k: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        kv.append(0, 0, &k, &v).unwrap();
        keys.push(k);
        values.push(v);
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = kv.attend(0, 0, &q, t).unwrap();
        let (ctx, w) = naive_attention(&keys, &values, &q);
        assert_eq!(got.context, ctx);
        assert_eq!(got.weights, w);
        if t % 7 == 6 {
            kv.seal_span(start..t + 1, CachePolicy::FULL).unwrap();
            start = t + 1;
        }
    }
}

#[test]
fn int8_spans_respect_elementwise_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut kv = KvStore::new(KvConfig {
        n_layers: 1,
        n_heads: 1,
        d_head: 4,
        sinks: 0,
    });
    let mut raw = Vec::new();
    for _ in 0..10 {
        let k: Vec<f32> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f32> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
        kv.append(0, 0, &k, &v).unwrap();
        raw.push((k, v));
    }
    kv.seal_span(0..10, CachePolicy::INT8).unwrap();
    let max_k = raw
        .iter()
        .flat_map(|(k, _)| k)
        .fold(0f32, |m, x| m.max(x.abs()));
    let max_v = raw
        .iter()
        .flat_map(|(_, v)| v)
        .fold(0f32, |m, x| m.max(x.abs()));
    for (pos, (k, v)) in raw.iter().enumerate() {
        let sk = kv.key(0, 0, pos).unwrap();
        let sv = kv.value(0, 0, pos).unwrap();
        for (a, b) in k.iter().zip(&sk) {
            assert!((a - b).abs() <= max_k / 254.0 + 1e-7);
        }
        for (a, b) in v.iter().zip(&sv) {
            assert!((a - b).abs() <= max_v / 254.0 + 1e-7);
        }
    }
    let (q, s) = quantize_symmetric(&[0.0, 0.0]);
    assert_eq!((q, s), (vec![0, 0], 0.0));
}

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        max_seq: 160,
        ..Default::default()
    }
}

fn rt(text: &str) -> Runtime {
    let mut cfg = RunConfig::parse(text).unwrap();
    cfg.model = ModelSource::Seed(small());
    Runtime::prepare(cfg).unwrap()
}

const CHUNKWISE: &str = "policy.band_edges = 0.62,0.74\nchunker.tau = 0.74\n";

fn corpus(n: usize, len: usize) -> Vec<Vec<u8>> {
    bimodal_corpus(&CorpusSpec {
        seed: 21,
        sequences: n,
        length: len,
    })
}

/// Independent MAC counter: 2·r·(d_in + d_out) per active site and setting.
fn count_macs(rt: &Runtime, mixes: &[AdapterMix]) -> u64 {
    let cfg = rt.model().cfg;
    let per_rank: u64 = cfg
        .sites()
        .iter()
        .map(|s| {
            let (o, i) = cfg.site_dims(s.kind);
            2 * (o + i) as u64
        })
        .sum();
    let cost = |s: &ChunkAdapterSetting| {
        if s.scale == 0.0 {
            0
        } else {
            s.rank as u64 * per_rank
        }
    };
    mixes
        .iter()
        .map(|m| match m {
            AdapterMix::Single(s) => cost(s),
            AdapterMix::Blend {
                outgoing, incoming, ..
            } => cost(outgoing) + cost(incoming),
        })
        .sum()
}

#[test]
fn modeled_macs_match_counter_and_beat_static() {
    let cw = rt(CHUNKWISE);
    let st = rt("mode = static\n");
    for seq in corpus(3, 144) {
        let a = cw.run_forced(&seq).unwrap();
        let b = st.run_forced(&seq).unwrap();
        assert_eq!(a.report.adapter_macs, count_macs(&cw, &a.mixes));
        assert_eq!(b.report.adapter_macs, count_macs(&st, &b.mixes));
        assert!(a.report.adapter_macs < b.report.adapter_macs);
        let tokens: usize = a.report.chunk_log.iter().map(|c| c.end - c.start).sum();
        assert_eq!(tokens, seq.len());
    }
}

#[test]
fn schedule_is_sound_and_causal() {
    let cw =
        rt("policy.band_edges = 0.62,0.74\nchunker.tau = 0.74\nchunker.crossfade_window = 4\n");
    let mut blends = 0;
    for seq in corpus(3, 144) {
        let run = cw.run_forced(&seq).unwrap();
        let log = &run.report.chunk_log;
        blends += run
            .mixes
            .iter()
            .filter(|m| matches!(m, AdapterMix::Blend { .. }))
            .count();
        for (i, c) in log.iter().enumerate() {
            let applied = ChunkAdapterSetting {
                rank: c.applied_rank,
                scale: c.applied_scale,
            };
            if i > 0 {
                // The setting running over chunk i is the plan of chunk i-1.
                assert_eq!(
                    (log[i - 1].rank, log[i - 1].scale),
                    (applied.rank, applied.scale)
                );
                assert_eq!(log[i - 1].plan_applies_from, Some(c.start));
            }
            for pos in c.start..c.end {
                match run.mixes[pos] {
                    AdapterMix::Single(s) => assert_eq!(s, applied),
                    AdapterMix::Blend {
                        outgoing,
                        incoming,
                        lambda,
                    } => {
                        assert!(c.faded_in && pos < c.start + 4);
                        assert_eq!(incoming, applied);
                        let prev = &log[i - 1];
                        assert_eq!(outgoing.rank, prev.applied_rank);
                        assert_eq!(lambda, 1.0 - (pos - c.start) as f64 / 4.0);
                        assert!((0.0..=1.0).contains(&lambda));
                    }
                }
            }
        }
    }
    assert!(blends > 0);
}

#[test]
fn perplexity_matches_direct_nll() {
    let st = rt("mode = static\nstatic.rank = 8\nstatic.scale = 0.75\n");
    let text = vec![b'q'; 40];
    let ppl = st.perplexity(&text).unwrap();

    let model = st.model();
    let mut cache = KvStore::new(KvConfig {
        sinks: 4,
        ..model.cfg.kv_config()
    });
    let mix = AdapterMix::Single(ChunkAdapterSetting::new(8, 0.75).unwrap());
    let set = ActiveAdapterSet::uniform(st.bank(), mix);
    let mut total = 0.0;
    for i in 0..text.len() - 1 {
        let out = model
            .forward_step(text[i] as usize, &mut cache, &set)
            .unwrap();
        let l: Vec<f64> = out.logits.iter().map(|&x| x as f64).collect();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - l[text[i + 1] as usize];
    }
    let oracle = (total / (text.len() - 1) as f64).exp();
    assert!((ppl - oracle).abs() <= 1e-12 * oracle, "{ppl} vs {oracle}");
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let mut model = init_model(&small()).unwrap();
    model.lm_head = Matrix::zeros(model.cfg.vocab_size, model.cfg.d_model);
    let adapters = synthesize_bank_adapters(&model, 7, 16).unwrap();
    let cfg = RunConfig::parse(CHUNKWISE).unwrap();
    let rt = Runtime::with_adapters(cfg, model, &adapters).unwrap();
    let ppl = rt.perplexity(&corpus(1, 100)[0]).unwrap();
    assert!((ppl - 256.0).abs() <= 0.01 * 256.0, "{ppl}");
}

#[test]
fn degenerate_chunkwise_equals_static() {
    let degenerate = rt(
        "policy.band_edges =\npolicy.ranks = 16\npolicy.scales = 1.0\npolicy.cache = full\n\
         chunker.crossfade_window = 0\ndecode.length = 40\n",
    );
    let st = rt("mode = static\ndecode.length = 40\n");
    for p in corpus(3, 64) {
        let (a, _) = degenerate.decode(&p).unwrap();
        let (b, _) = st.decode(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            degenerate.perplexity(&p).unwrap().to_bits(),
            st.perplexity(&p).unwrap().to_bits()
        );
    }
}

#[test]
fn buckets_match_sort_and_threshold() {
    let cw = rt(CHUNKWISE);
    let prompts: Vec<Vec<u8>> = (0..12)
        .map(|i| {
            let mut c = corpus(1, 20 + 9 * i).remove(0);
            c.rotate_left(i);
            c
        })
        .collect();
    let mut streams = Vec::new();
    for p in &prompts {
        let mut s = cw.stream().unwrap();
        for &b in p {
            s.step(b).unwrap();
        }
        streams.push(s);
    }
    let buckets = bucket_batch(cw.table(), &streams).unwrap();
    let levels: Vec<f64> = streams.iter().map(|s| s.running_mean().unwrap()).collect();

    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
    let edges = cw.table().band_edges();
    let mut expected: Vec<Vec<usize>> = vec![Vec::new(); edges.len() + 1];
    for i in order {
        let band = edges.iter().filter(|&&e| levels[i] >= e).count();
        expected[band].push(i);
    }
    for b in &mut expected {
        b.sort_unstable();
    }
    expected.retain(|b| !b.is_empty());
    assert_eq!(buckets, expected);

    let same: Vec<_> = (0..3)
        .map(|_| {
            let mut s = cw.stream().unwrap();
            for &b in &prompts[0] {
                s.step(b).unwrap();
            }
            s
        })
        .collect();
    assert_eq!(
        bucket_batch(cw.table(), &same).unwrap(),
        vec![vec![0, 1, 2]]
    );
    assert!(bucket_batch(cw.table(), &[]).unwrap().is_empty());
}

#[test]
fn batch_decode_matches_single_decode() {
    let cw = rt(&format!("{CHUNKWISE}decode.length = 12\n"));
    let prompts = corpus(4, 30);
    let batch = cw.decode_batch(&prompts).unwrap();
    let members: usize = batch.buckets.iter().map(Vec::len).sum();
    assert_eq!(members, prompts.len());
    for (p, (tokens, report)) in prompts.iter().zip(&batch.outputs) {
        let (t, r) = cw.decode(p).unwrap();
        assert_eq!(&t, tokens);
        assert_eq!(r.chunk_log, report.chunk_log);
        assert_eq!(r.adapter_macs, report.adapter_macs);
    }
}

#[test]
fn bench_deltas() {
    let seqs = corpus(2, 96);
    let a = rt("mode = static\n");
    let b = rt("mode = static\n");
    let r = bench(&[("a".into(), a.clone()), ("b".into(), b)], &seqs).unwrap();
    assert_eq!(r[1].delta_adapter_macs, 0);
    assert_eq!(r[1].delta_peak_cache_bytes, 0);
    assert_eq!(r[1].delta_perplexity, 0.0);

    let low = rt("mode = static\nstatic.rank = 4\n");
    let r = bench(&[("16".into(), a.clone()), ("4".into(), low)], &seqs).unwrap();
    assert!(r[1].adapter_macs < r[0].adapter_macs);
    assert!(r[1].delta_adapter_macs < 0);

    let cw = rt(CHUNKWISE);
    let r = bench(&[("static".into(), a), ("chunkwise".into(), cw)], &seqs).unwrap();
    assert!(r[1].peak_cache_bytes < r[0].peak_cache_bytes);
}
