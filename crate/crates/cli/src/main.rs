use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agent_core::checkpoint::Checkpoint;
use agent_core::config::RunConfig;
use agent_core::corpus::{build_vocab, encode_ids, parse_nested, DocumentTree, IdTree, Vocabulary};
use agent_core::trainer::{
    check_grads, embed, evaluate, generate, init_state, load_corpus, train, GenerateOptions,
    TrainOptions, CHECKPOINT_FILE, METRICS_FILE,
};
use agent_core::{Checkpoint64, Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "agent",
    version,
    about = "Hierarchical nested-document encoder, trainer and generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Builds a vocabulary file from a corpus.
    BuildVocab {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains (or resumes) a model, writing checkpoints and metrics to `--out`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Vocabulary file; built from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Token-first curriculum across levels.
        #[arg(long)]
        staged: bool,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the vector tree of a document as JSON lines.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        document: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Samples and decodes a new document.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        edit_steps: usize,
        #[arg(long, default_value_t = 0.1)]
        edit_eps: f64,
        /// Level of the generated root; defaults to the document level.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        dump_dvt: Option<PathBuf>,
        #[arg(long)]
        dump_answers: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss component on a tiny batch.
    CheckGrads {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean losses and greedy reconstruction accuracy on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the corpus named in the checkpoint's config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let (Some(c), Some(dir)) = (&cfg.corpus, p.parent()) {
                if Path::new(c).is_relative() {
                    cfg.corpus = Some(dir.join(c).to_string_lossy().into_owned());
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if run.seed.is_some() {
        cfg.seed = run.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.corpus.clone().map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config("no corpus given (--corpus or the config's corpus field)".into())
        })
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn encode_all(docs: &[DocumentTree], vocab: &Vocabulary) -> Vec<IdTree> {
    docs.iter().map(|d| encode_ids(d, vocab)).collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::BuildVocab { run, corpus, out } => {
            let cfg = load_config(&run)?;
            let docs = load_corpus(&corpus_path(corpus, &cfg)?)?;
            let vocab = build_vocab(&docs, cfg.min_freq, cfg.max_vocab)?;
            std::fs::write(&out, vocab.to_file_string())?;
            info!("{} tokens written to {}", vocab.len(), out.display());
        }
        Command::Train {
            run,
            corpus,
            vocab,
            staged,
            resume,
            out,
        } => {
            let mut cfg = load_config(&run)?;
            cfg.staged |= staged;
            let docs = load_corpus(&corpus_path(corpus, &cfg)?)?;
            let ck = out.join(CHECKPOINT_FILE);
            let mut state = if resume && ck.exists() {
                let s = Checkpoint64::load(&ck)?;
                info!(
                    "resuming at step {} (adversarial step {})",
                    s.step, s.gan_step
                );
                s
            } else {
                let vocab = match vocab {
                    Some(p) => Vocabulary::from_file_string(&std::fs::read_to_string(p)?)?,
                    None => build_vocab(&docs, cfg.min_freq, cfg.max_vocab)?,
                };
                init_state(cfg, vocab)?
            };
            let trees = encode_all(&docs, &state.vocab);
            std::fs::create_dir_all(&out)?;
            let metrics = OpenOptions::new()
                .create(true)
                .write(true)
                .append(resume)
                .truncate(!resume)
                .open(out.join(METRICS_FILE))?;
            let mut metrics = BufWriter::new(metrics);
            let summary = train(
                &mut state,
                &trees,
                TrainOptions {
                    out: Some(&out),
                    metrics: Some(&mut metrics),
                },
            );
            metrics.flush()?;
            let summary = summary?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Embed {
            checkpoint,
            document,
            out,
        } => {
            let state = Checkpoint64::load(&checkpoint)?;
            let doc = parse_nested(&std::fs::read_to_string(document)?)?;
            let tree = encode_ids(&doc, &state.vocab);
            let mut text = String::new();
            for rec in embed(&state.model, &tree)? {
                text.push_str(&serde_json::to_string(&rec)?);
                text.push('\n');
            }
            write_out(out.as_deref(), &text)?;
        }
        Command::Generate {
            checkpoint,
            seed,
            edit_steps,
            edit_eps,
            levels,
            dump_dvt,
            dump_answers,
            out,
        } => {
            let state: Checkpoint<f64> = Checkpoint::load(&checkpoint)?;
            let g = generate(
                &state,
                GenerateOptions {
                    level: levels.unwrap_or(state.model.depth()),
                    seed,
                    edit_steps,
                    edit_eps,
                },
            )?;
            if let Some(p) = dump_dvt {
                serde_json::to_writer(BufWriter::new(File::create(p)?), &g.dvt)?;
            }
            if let Some(p) = dump_answers {
                serde_json::to_writer(BufWriter::new(File::create(p)?), &g.dvt.answers)?;
            }
            for (level, path) in &g.empty {
                log::warn!("dropped empty {} at {path:?}", g.dvt.levels[*level]);
            }
            match g.text {
                Some(t) => write_out(out.as_deref(), &format!("{t}\n"))?,
                None => return Err(Error::Empty("every generated sentence was empty".into())),
            }
        }
        Command::CheckGrads {
            run,
            tolerance,
            out,
        } => {
            let cfg = load_config(&run)?;
            let report = check_grads(&cfg, tolerance)?;
            for e in &report.entries {
                eprintln!(
                    "{} {:<48} {:.3e} ({} coords, {:.1}s)",
                    if e.passed { "ok  " } else { "FAIL" },
                    e.name,
                    e.max_rel_error,
                    e.coordinates,
                    e.seconds
                );
            }
            write_out(
                out.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&report)?),
            )?;
            return Ok(report.passed);
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
        } => {
            let state = Checkpoint64::load(&checkpoint)?;
            let docs = load_corpus(&corpus_path(corpus, &state.config)?)?;
            let report = evaluate(&state, &encode_all(&docs, &state.vocab))?;
            write_out(
                out.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&report)?),
            )?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
