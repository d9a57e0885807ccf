use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use contrastive_core::model::CaMode;
use contrastive_core::pool::pool_stats;
use contrastive_core::rng;
use contrastive_core::tape::OpKind;

use contrastive::config::RunConfig;
use contrastive::dataset::{self, Corpus};
use contrastive::error::{CliError, Result};
use contrastive::pipeline::{self, Generated, TSV_HEADER};
use contrastive::{checkpoint, gradcheck, inspect, npol};

#[derive(Parser)]
#[command(
    name = "contrastive",
    version,
    about = "Contrastive attention for abnormality-aware report generation"
)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// File of `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus directory.
    Synth {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        abnormal_rate: Option<f64>,
    },
    /// Build a normality pool from the training split.
    BuildPool {
        #[arg(long)]
        corpus: PathBuf,
        /// Pool size; capped at the number of available normals only when omitted.
        #[arg(long)]
        size: Option<usize>,
        /// Take the projection from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt, pool.npol and loss.csv to --out.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Baseline: the decoder reads projected features directly.
        #[arg(long, conflicts_with = "da_only")]
        no_ca: bool,
        /// Replace aggregate attention by random pool rows.
        #[arg(long)]
        da_only: bool,
        #[arg(long)]
        refresh_pool_every: Option<usize>,
    },
    /// Greedy reports for one split as JSONL.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score generated reports against a split.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the full pipeline at toy dimensions.
    Gradcheck {
        /// For example `d=8,n=2,np=5,ni=4,v=12`.
        #[arg(long, default_value = "")]
        dims: String,
        #[arg(long, default_value = "full")]
        mode: String,
        /// Scale the softmax adjoint by 1.5; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Dump attention weights, closest normals and patch saliency.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Also write saliency.pgm with this many pixels per patch.
        #[arg(long)]
        pgm: Option<usize>,
    },
    /// Baseline, w/ DA and w/ DA+AA over a sweep of head counts.
    Ablation {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10")]
        heads: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn base_config(shared: &Shared) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &shared.config {
        c.apply_file(p)?;
    }
    if let Some(s) = shared.seed {
        c.seed = s;
    }
    Ok(c)
}

fn out_path(shared: &Shared, default: &str) -> PathBuf {
    shared.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = base_config(&cli.shared)?;
    let shared = &cli.shared;
    match cli.command {
        Command::Synth {
            size,
            abnormal_rate,
        } => {
            if let Some(s) = size {
                config.size = s;
            }
            if let Some(r) = abnormal_rate {
                config.abnormal_rate = r;
            }
            let dir = out_path(shared, "corpus");
            let s = dataset::gen_corpus(
                &dir,
                config.seed,
                config.size,
                config.abnormal_rate,
                &config.synth,
            )?;
            println!(
                "wrote {}: train {} / val {} / test {}, {} abnormal, vocab {}",
                dir.display(),
                s.train,
                s.val,
                s.test,
                s.abnormal,
                s.vocab
            );
        }
        Command::BuildPool {
            corpus,
            size,
            checkpoint: ck,
        } => {
            let corpus = Corpus::open(corpus)?;
            let train = corpus.instances("train")?;
            let vocab = corpus.vocab()?;
            let model = match ck {
                Some(p) => checkpoint::load(&p)?.model,
                None => pipeline::init_model(&train, &vocab, &config)?,
            };
            let pool = match size {
                Some(n) => {
                    contrastive_core::pool::build_pool(&train, &model.projection, n, config.seed)?
                }
                None => pipeline::pool_for(&train, &model, &config)?,
            };
            let path = out_path(shared, "pool.npol");
            npol::save(&pool, &path)?;
            let stats = pool_stats(&pool);
            println!(
                "wrote {}: {} entries of width {}, nearest duplicate distance {}",
                path.display(),
                stats.count,
                pool.d(),
                stats
                    .nearest_duplicate_distance
                    .map_or("n/a".to_string(), |d| format!("{d:.6}"))
            );
        }
        Command::Train {
            corpus,
            pool,
            steps,
            lr,
            no_ca,
            da_only,
            refresh_pool_every,
        } => {
            if let Some(s) = steps {
                config.steps = s;
            }
            if let Some(l) = lr {
                config.learning_rate = l;
            }
            if let Some(r) = refresh_pool_every {
                config.refresh_pool_every = r;
            }
            if no_ca {
                config.mode = CaMode::Off;
            } else if da_only {
                config.mode = CaMode::DifferentiateOnly;
            }
            let corpus = Corpus::open(corpus)?;
            let train = corpus.instances("train")?;
            let vocab = corpus.vocab()?;
            let pool = pool.map(|p| npol::load(&p)).transpose()?;
            let dir = out_path(shared, "run");
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let mut log = String::from("step,loss\n");
            let every = (config.steps / 20).max(1);
            let start = Instant::now();
            let run = pipeline::fit(&train, &vocab, &config, pool, |step, loss| {
                log.push_str(&format!("{step},{loss:.17e}\n"));
                if (step + 1) % every == 0 {
                    log::info!("step {:>6}  loss {loss:.4}", step + 1);
                }
            })?;
            checkpoint::save(&run.model, &vocab, &dir.join("model.ckpt"))?;
            npol::save(&run.pool, &dir.join("pool.npol"))?;
            write_file(&dir.join("loss.csv"), &log)?;
            println!(
                "trained {} steps in {:.1}s; wrote {}",
                config.steps,
                start.elapsed().as_secs_f64(),
                dir.display()
            );
        }
        Command::Generate {
            checkpoint: ck,
            pool,
            corpus,
            split,
            max_len,
        } => {
            let ck = checkpoint::load(&ck)?;
            let pool = npol::load(&pool)?;
            if !pool.matches_projection(&ck.model.projection) {
                log::warn!("pool fingerprint does not match the checkpoint projection");
            }
            let instances = Corpus::open(corpus)?.instances(&split)?;
            let generated = pipeline::generate(
                &ck.model,
                &ck.vocab,
                &pool,
                &instances,
                max_len.unwrap_or(config.max_len),
                config.seed,
            )?;
            let mut text = String::new();
            for g in &generated {
                text.push_str(&serde_json::to_string(g).expect("serializes"));
                text.push('\n');
            }
            let path = out_path(shared, "generated.jsonl");
            write_file(&path, &text)?;
            println!("wrote {} reports to {}", generated.len(), path.display());
        }
        Command::Evaluate {
            generated,
            corpus,
            split,
        } => {
            let generated: Vec<Generated> = dataset::read_jsonl(&generated)?;
            let gold = Corpus::open(corpus)?.instances(&split)?;
            let report = pipeline::evaluate(&generated, &gold)?;
            let tsv = format!("{TSV_HEADER}\n{}\n", pipeline::tsv_row(&report));
            match &shared.out {
                Some(p) => write_file(p, &tsv)?,
                None => print!("{tsv}"),
            }
        }
        Command::Gradcheck {
            dims,
            mode,
            corrupt_adjoint,
        } => {
            let dims = gradcheck::Dims::parse(&dims)?;
            config.set("mode", &mode)?;
            let fault = corrupt_adjoint.then_some((OpKind::SoftmaxRows, 1.5));
            let start = Instant::now();
            let outcome = gradcheck::run(dims, config.mode, config.seed, fault)?;
            let mut out = std::io::stdout().lock();
            for (name, r) in &outcome.reports {
                let _ = writeln!(
                    out,
                    "{:<5} {name:<22} entries {:>5}  max rel {:.3e}  max abs {:.3e}",
                    if r.passed { "ok" } else { "FAIL" },
                    r.checked,
                    r.max_rel,
                    r.max_abs
                );
            }
            let _ = writeln!(
                out,
                "{} entries checked in {:.2}s, max rel err {:.3e}",
                outcome.checked(),
                start.elapsed().as_secs_f64(),
                outcome.max_rel()
            );
            if !outcome.passed() {
                return Err(CliError::Verification(
                    "analytic and numeric gradients disagree".into(),
                ));
            }
        }
        Command::Inspect {
            checkpoint: ck,
            pool,
            corpus,
            id,
            top_k,
            pgm,
        } => {
            let ck = checkpoint::load(&ck)?;
            let pool = npol::load(&pool)?;
            let corpus = Corpus::open(corpus)?;
            let instance = corpus.find(&id)?;
            let mut r = rng::seeded(config.seed);
            let ins = inspect::inspect(&ck.model, &pool, &instance, top_k, &mut r)?;
            let dir = out_path(shared, "inspect");
            inspect::write_all(&dir, &ins, &pool, pgm)?;
            let block = corpus
                .meta()
                .ok()
                .and_then(|m| m.spec_for(&id))
                .and_then(|s| s.abnormal_block);
            let block = block.map_or("none".to_string(), |b| {
                format!("patches {}..{}", b.start, b.start + b.len)
            });
            println!(
                "wrote {}; peak saliency at patch {} (injected block: {block})",
                dir.display(),
                ins.peak_patch()
            );
        }
        Command::Ablation {
            corpus,
            heads,
            seeds,
            steps,
            split,
        } => {
            if let Some(s) = steps {
                config.steps = s;
            }
            let corpus = Corpus::open(corpus)?;
            let train = corpus.instances("train")?;
            let eval = corpus.instances(&split)?;
            let vocab = corpus.vocab()?;
            let seeds: Vec<u64> = (0..seeds).map(|s| config.seed + s).collect();
            let arms = pipeline::sweep_arms(&heads);
            let results = pipeline::run_ablation(
                &train,
                &eval,
                &vocab,
                &config,
                &arms,
                &seeds,
                |arm, seed, r| {
                    log::info!(
                        "{} seed {seed}: B-4 {:.4} F1 {:.4}",
                        arm.label(),
                        r.bleu[3],
                        r.efficacy.f1
                    );
                },
            )?;
            let tsv = pipeline::ablation_tsv(&results);
            match &shared.out {
                Some(p) => write_file(p, &tsv)?,
                None => print!("{tsv}"),
            }
        }
    }
    Ok(())
}
