use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use chunkwise_lora::adapter::{
    build_rank_ladder, load_adapter, save_adapter, ChunkAdapterSetting, RankSet,
};
use chunkwise_lora::policy::calibrate;
use chunkwise_lora::runtime::bench::{bench, write_bench_jsonl};
use chunkwise_lora::runtime::config::policy_section;
use chunkwise_lora::runtime::{
    bimodal_corpus, corpus::write_corpus, load_corpus, load_corpus_source, save_corpus,
    synthesize_bank_adapters, AdapterSource, CorpusSpec, Mode, ModelSource, RunConfig, Runtime,
};
use chunkwise_lora::toymodel::{init_model, save_model};
use chunkwise_lora::{Error, Result};

#[derive(Parser)]
#[command(
    name = "chunkwise",
    version,
    about = "Chunk-wise adaptive LoRA decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Singular values and per-rank truncation error of an adapter file.
    Ladder {
        adapter: PathBuf,
        /// Ranks to report besides 0 and full.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        ranks: Vec<usize>,
    },
    /// Percentile policy table and tau from a corpus, as config lines.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Hex corpus; defaults to the config's calibration source.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy generation from a prompt; prints hex tokens, then metrics
    /// unless `metrics.path` is set.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's prompt.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Compares two or more configs on the first config's corpus.
    Bench {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Hex corpus overriding the first config's corpus source.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded bimodal corpus, one hex sequence per line.
    GenCorpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        sequences: usize,
        #[arg(long, default_value_t = 256)]
        length: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the seeded model and adapters of a config as CWLM/CWLA files.
    GenWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ladder { adapter, ranks } => {
            let a = load_adapter(&adapter)?;
            let full = a.d_out().min(a.d_in());
            let mut ranks: Vec<usize> = ranks.into_iter().filter(|&r| r > 0 && r <= full).collect();
            ranks.push(full);
            let ladder = build_rank_ladder(&a, &RankSet::new(ranks.clone())?)?;
            ranks.insert(0, 0);
            ranks.dedup();
            let errors = ranks
                .iter()
                .map(|&r| {
                    Ok(json!({"rank": r, "linearization_error": ladder.linearization_error(r)?}))
                })
                .collect::<Result<Vec<_>>>()?;
            let summary = json!({
                "site": a.site.to_string(),
                "d_out": a.d_out(),
                "d_in": a.d_in(),
                "trained_rank": a.trained_rank,
                "sigma": ladder.sigma(),
                "errors": errors,
            });
            println!("{summary}");
        }
        Command::Calibrate {
            config,
            corpus,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let corpus = match corpus {
                Some(p) => load_corpus(&p)?,
                None => load_corpus_source(&cfg.calibration)?,
            };
            let tau = cfg.tau;
            cfg.mode = Mode::Static(ChunkAdapterSetting::new(cfg.allowed_ranks.max(), 1.0)?);
            cfg.tau = None;
            let rt = Runtime::prepare(cfg)?;
            let cal = calibrate(&rt.calibration_scores_on(&corpus)?)?;
            let mut w = output(out.as_deref())?;
            write!(w, "{}", policy_section(&cal.table, tau.unwrap_or(cal.tau)))?;
            w.flush()?;
        }
        Command::Decode { config, prompt } => {
            let cfg = RunConfig::from_file(&config)?;
            let prompt = match (prompt, &cfg.prompt_text, &cfg.prompt_file) {
                (Some(p), _, _) => p.into_bytes(),
                (None, Some(t), _) => t.clone().into_bytes(),
                (None, None, Some(f)) => std::fs::read(f)?,
                (None, None, None) => {
                    return Err(Error::Config(
                        "no prompt: pass --prompt or set prompt.text / prompt.file".into(),
                    ))
                }
            };
            let metrics_path = cfg.metrics_path.clone();
            let rt = Runtime::prepare(cfg)?;
            let (tokens, report) = rt.decode(&prompt)?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{}", hex_string(&tokens))?;
            match metrics_path {
                Some(p) => {
                    let mut w = output(Some(&p))?;
                    report.write_jsonl(&mut w)?;
                    w.flush()?;
                }
                None => report.write_jsonl(&mut stdout)?,
            }
        }
        Command::Bench {
            configs,
            corpus,
            out,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| RunConfig::from_file(p))
                .collect::<Result<Vec<_>>>()?;
            if cfgs.len() < 2 {
                return Err(Error::Config("bench needs at least 2 configs".into()));
            }
            let corpus = match corpus {
                Some(p) => load_corpus(&p)?,
                None => load_corpus_source(&cfgs[0].corpus)?,
            };
            let runtimes = configs
                .iter()
                .zip(cfgs)
                .map(|(p, c)| Ok((p.display().to_string(), Runtime::prepare(c)?)))
                .collect::<Result<Vec<_>>>()?;
            let entries = bench(&runtimes, &corpus)?;
            let mut w = output(out.as_deref())?;
            write_bench_jsonl(&entries, &mut w)?;
            w.flush()?;
        }
        Command::GenCorpus {
            seed,
            sequences,
            length,
            out,
        } => {
            let seqs = bimodal_corpus(&CorpusSpec {
                seed,
                sequences,
                length,
            });
            match out {
                Some(p) => save_corpus(&seqs, &p)?,
                None => {
                    let mut w = output(None)?;
                    write_corpus(&seqs, &mut w)?;
                    w.flush()?;
                }
            }
        }
        Command::GenWeights { config, out_dir } => {
            let cfg = load_config(config.as_deref())?;
            let (model_cfg, seed, r_max) = match (&cfg.model, &cfg.adapters) {
                (ModelSource::Seed(m), AdapterSource::Seed { seed, r_max }) => (*m, *seed, *r_max),
                _ => {
                    return Err(Error::Config(
                        "gen-weights needs seeded model and adapters".into(),
                    ))
                }
            };
            std::fs::create_dir_all(&out_dir)?;
            let model = init_model(&model_cfg)?;
            save_model(&model, &out_dir.join("model.cwlm"))?;
            for a in synthesize_bank_adapters(&model, seed, r_max)? {
                let name = format!("L{}_{}.cwla", a.site.layer, a.site.kind.name());
                save_adapter(&a, &out_dir.join(name))?;
            }
        }
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
