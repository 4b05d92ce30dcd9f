//! One binary for the whole pipeline: generate a planted-signal dataset,
//! train the filtering policy, compress a corpus, evaluate against the
//! baselines, check gradients, and run the end-to-end selftest.
//!
//! All randomness flows from a single seed; `--threads` changes only the
//! wall clock, never a result. `REINPOOL_LOG` sets log verbosity.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::AppConfig;
use reinpool_core::eval::{emit_report, evaluate, EvalMethod, ReportFormat};
use reinpool_core::gradcheck::{self, GradCheckConfig};
use reinpool_core::synth::{self, Dataset};
use reinpool_core::trainer::{TrainConfig, Trainer, CHECKPOINT_DIR};
use reinpool_core::{Error, PoolKind, Result, SynthConfig};

#[derive(Parser)]
#[command(
    name = "reinpool",
    version,
    about = "Multi-vector embedding compression via a learned filtering policy"
)]
struct Cli {
    /// TOML config file with [synth], [train], and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the generator and trainer seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default 1; results are identical at any setting).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal dataset directory.
    Gen(GenArgs),
    /// Train the filtering policy on a dataset directory.
    Train(TrainArgs),
    /// Compress a corpus into a single-vector index with a checkpoint.
    Compress(CompressArgs),
    /// Evaluate retrieval methods over a dataset and emit a report.
    Eval(EvalArgs),
    /// Check the policy gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run gen -> train -> compress -> eval and assert the quality gates.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `gen` or assembled externally).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from the checkpoint inside the run directory.
    #[arg(long)]
    resume: bool,
    /// Rollouts per document per step.
    #[arg(long = "group-size")]
    group_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Total training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Pooling kind: mean or max.
    #[arg(long)]
    pool: Option<PoolKind>,
}

#[derive(Args)]
struct CompressArgs {
    /// Policy checkpoint directory (policy.json + policy.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to compress: a collection directory or a dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output index directory.
    #[arg(long)]
    out: PathBuf,
    /// Keep threshold in (0, 1).
    #[arg(long)]
    threshold: Option<f64>,
    /// Pooling kind: mean or max.
    #[arg(long)]
    pool: Option<PoolKind>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Policy checkpoint directory for reinpool methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Methods to evaluate (repeatable); defaults from the config file.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Keep threshold for reinpool methods.
    #[arg(long)]
    threshold: Option<f64>,
    /// Report file to write (stdout always gets the table).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format for --out: table, csv, or json.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 6)]
    rows: usize,
    /// Test hook: perturb the analytic gradient so the check fails.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Scratch directory (a temporary directory by default).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps for the learned run.
    #[arg(long, default_value_t = 3000)]
    steps: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::CorruptStore(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REINPOOL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let threads = cli.threads.or(cfg.threads).unwrap_or(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Gen(args) => cmd_gen(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Compress(args) => cmd_compress(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Selftest(args) => cmd_selftest(cfg, args),
    }
}

fn log_config<T: serde::Serialize>(label: &str, value: &T) {
    match toml::to_string_pretty(value) {
        Ok(text) => log::info!("resolved {label} config:\n{text}"),
        Err(e) => log::warn!("could not serialize {label} config: {e}"),
    }
}

fn cmd_gen(cfg: AppConfig, args: GenArgs) -> Result<()> {
    log_config("synth", &cfg.synth);
    let data = synth::generate(&cfg.synth)?;
    synth::write_dataset(&data, &args.out)?;
    let geometry = synth::geometry_report(&data, PoolKind::Mean, false)?;
    println!(
        "wrote {} docs, {} queries to {}",
        data.docs.len(),
        data.queries.len(),
        args.out.display()
    );
    println!(
        "planted geometry (mean pooling): oracle ndcg@3 {:.4}, static ndcg@3 {:.4}",
        geometry.oracle_ndcg3, geometry.static_ndcg3
    );
    if geometry.oracle_ndcg3 - geometry.static_ndcg3 < 0.05 {
        log::warn!(
            "oracle barely beats static ({:.4} vs {:.4}); consider more background dilution",
            geometry.oracle_ndcg3,
            geometry.static_ndcg3
        );
    }
    Ok(())
}

fn resolved_train_config(cfg: &AppConfig, args: &TrainArgs) -> TrainConfig {
    let mut train = cfg.train.clone();
    if let Some(g) = args.group_size {
        train.group_size = g;
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(steps) = args.steps {
        train.max_steps = steps;
    }
    if let Some(pool) = args.pool {
        train.pool = pool;
    }
    train
}

fn cmd_train(cfg: AppConfig, args: TrainArgs) -> Result<()> {
    let train_cfg = resolved_train_config(&cfg, &args);
    log_config("train", &train_cfg);
    let Dataset {
        docs,
        queries,
        qrels,
        ..
    } = synth::load_dataset(&args.data)?;

    let mut trainer = if args.resume {
        Trainer::resume(
            docs,
            queries,
            qrels,
            train_cfg,
            &args.out.join(CHECKPOINT_DIR),
        )?
    } else {
        Trainer::new(docs, queries, qrels, train_cfg)?
    };
    log::info!(
        "training on {} docs ({} validation), {} skipped",
        trainer.train_doc_count(),
        trainer.val_doc_count(),
        trainer.skipped_docs()
    );
    let start = Instant::now();
    let summary = trainer.run(Some(&args.out))?;
    println!(
        "trained {} steps in {:.1}s; validation ndcg@3 final {:.4}, best {:.4}; kept fraction {:.3} -> {:.3}",
        summary.steps,
        start.elapsed().as_secs_f64(),
        summary.final_val.unwrap_or(f64::NAN),
        summary.best_val.unwrap_or(f64::NAN),
        summary.initial_kept_fraction,
        summary.final_kept_fraction
    );
    println!("checkpoint: {}", args.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

/// Accepts either a bare collection directory or a dataset directory with
/// a `corpus/` subdirectory.
fn corpus_dir(data: &Path) -> PathBuf {
    if data.join(reinpool_core::store::MANIFEST_FILE).exists() {
        data.to_path_buf()
    } else {
        data.join(synth::CORPUS_DIR)
    }
}

fn cmd_compress(cfg: AppConfig, args: CompressArgs) -> Result<()> {
    let docs = reinpool_core::load_collection(&corpus_dir(&args.data))?;
    let method = EvalMethod::ReinPool {
        kind: args.pool.unwrap_or(cfg.train.pool),
        checkpoint: args.checkpoint.clone(),
        threshold: args.threshold.unwrap_or(cfg.eval.threshold),
    };
    let index = reinpool_core::compress_with_method(&docs, &method)?;
    index.save(&args.out)?;
    let cost = reinpool_core::embedding_cost(&docs)?;
    println!(
        "compressed {} docs from {} to 1 x {} ({}x)",
        index.len(),
        cost,
        cost.dim,
        reinpool_core::store::format_count(cost.ratio())
    );
    Ok(())
}

fn cmd_eval(cfg: AppConfig, args: EvalArgs) -> Result<()> {
    let Dataset {
        docs,
        queries,
        qrels,
        ..
    } = synth::load_dataset(&args.data)?;
    let names = if args.methods.is_empty() {
        cfg.eval.methods.clone()
    } else {
        args.methods.clone()
    };
    let threshold = args.threshold.unwrap_or(cfg.eval.threshold);
    let methods: Vec<EvalMethod> = names
        .iter()
        .map(|n| EvalMethod::parse(n, args.checkpoint.as_deref(), threshold))
        .collect::<Result<_>>()?;
    log::info!("evaluating {} methods at k={}", methods.len(), cfg.eval.k);

    let report = evaluate(
        &methods,
        &docs,
        &queries,
        &qrels,
        cfg.eval.k,
        cfg.eval.normalize,
    )?;
    print!("{}", emit_report(&report, ReportFormat::Table)?);
    if let Some(out) = &args.out {
        let format: ReportFormat = args.format.as_deref().unwrap_or(&cfg.eval.format).parse()?;
        std::fs::write(out, emit_report(&report, format)?)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        dim: args.dim,
        heads: args.heads,
        rows: args.rows,
        corrupt: args.corrupt,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    for (name, err) in &report.per_tensor {
        println!("{name:>6}: max relative error {err:.3e}");
    }
    println!("max relative error: {:.3e}", report.max_rel_error);
    if report.max_rel_error <= 1e-4 {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} > 1e-4",
            report.max_rel_error
        )))
    }
}

fn cmd_selftest(cfg: AppConfig, args: SelftestArgs) -> Result<()> {
    let tmp;
    let root = match &args.out {
        Some(dir) => dir.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let seed = cfg.seed.unwrap_or(42);
    println!("selftest in {} (seed {seed})", root.display());

    // 1. generate
    let synth_cfg = SynthConfig { seed, ..cfg.synth };
    let data = synth::generate(&synth_cfg)?;
    let dataset_dir = root.join("dataset");
    synth::write_dataset(&data, &dataset_dir)?;
    let geometry = synth::geometry_report(&data, PoolKind::Mean, true)?;
    let precondition = geometry.oracle_ndcg3 - geometry.static_ndcg3 >= 0.15;
    println!(
        "selftest: planted geometry oracle {:.4} static {:.4}: {}",
        geometry.oracle_ndcg3,
        geometry.static_ndcg3,
        if precondition { "PASS" } else { "FAIL" }
    );

    // 2. train
    let train_cfg = TrainConfig {
        max_steps: args.steps,
        learning_rate: 3e-3,
        entropy_coeff: 0.02,
        plateau_patience: 20,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        data.docs.clone(),
        data.queries.clone(),
        data.qrels.clone(),
        train_cfg,
    )?;
    let start = Instant::now();
    let summary = trainer.run(Some(&root.join("run")))?;
    println!(
        "selftest: trained {} steps in {:.0}s, final validation {:.4}",
        summary.steps,
        start.elapsed().as_secs_f64(),
        summary.final_val.unwrap_or(f64::NAN)
    );
    let kept_drop = summary.initial_kept_fraction - summary.final_kept_fraction;
    let kept_ok = kept_drop >= 0.2;
    println!(
        "selftest: kept fraction {:.3} -> {:.3} (drop {:.3} >= 0.2): {}",
        summary.initial_kept_fraction,
        summary.final_kept_fraction,
        kept_drop,
        if kept_ok { "PASS" } else { "FAIL" }
    );

    // 3. compress
    let checkpoint = root.join("run").join(CHECKPOINT_DIR);
    let index_dir = root.join("index");
    let method = EvalMethod::ReinPool {
        kind: PoolKind::Mean,
        checkpoint: checkpoint.clone(),
        threshold: 0.5,
    };
    let index = reinpool_core::compress_with_method(&data.docs, &method)?;
    index.save(&index_dir)?;
    let bin_len = std::fs::metadata(index_dir.join(reinpool_core::store::VECTORS_FILE))?.len();
    let size_ok = bin_len == 4 * (data.docs.len() as u64) * (synth_cfg.dim as u64);
    println!(
        "selftest: index size {bin_len} bytes == docs x dim x 4: {}",
        if size_ok { "PASS" } else { "FAIL" }
    );

    // 4. evaluate (cosine scoring; mask sizes vary, so raw inner products
    // would rank by pooled norm)
    let methods = [
        EvalMethod::StaticPool {
            kind: PoolKind::Mean,
        },
        method,
    ];
    let report = evaluate(&methods, &data.docs, &data.queries, &data.qrels, 3, true)?;
    print!("{}", emit_report(&report, ReportFormat::Table)?);
    let static_avg = report.method("static").map(|m| m.average).unwrap_or(0.0);
    let learned_avg = report.method("reinpool").map(|m| m.average).unwrap_or(0.0);

    let beats_static = learned_avg >= static_avg + 0.10;
    println!(
        "selftest: reinpool {:.4} >= static {:.4} + 0.10: {}",
        learned_avg,
        static_avg,
        if beats_static { "PASS" } else { "FAIL" }
    );
    let near_ceiling = learned_avg >= 0.80 * geometry.oracle_ndcg3;
    println!(
        "selftest: reinpool {:.4} >= 80% of oracle {:.4}: {}",
        learned_avg,
        geometry.oracle_ndcg3,
        if near_ceiling { "PASS" } else { "FAIL" }
    );

    if precondition && kept_ok && size_ok && beats_static && near_ceiling {
        println!("selftest: PASS");
        Ok(())
    } else {
        Err(Error::Validation("selftest failed; see lines above".into()))
    }
}
