//! Command-line entry point: dataset generation, training, verification,
//! and inspection.
//!
//! Exit codes: 0 success, 1 runtime or input failure, 2 usage error,
//! 3 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlpl_core::config::{ModelConfig, RunConfig};
use dlpl_core::error::Error;
use dlpl_core::harness::{
    build_model, dump_feature_maps, evaluate, generate_dataset, history_csv, load_dataset,
    save_dataset, train, TrainOptions,
};
use dlpl_core::verify;

#[derive(Parser)]
#[command(
    name = "dlpl",
    about = "Discrete latent perspective learning: data generation, training, verification, inspection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shifted-view segmentation benchmark.
    GenData(GenDataArgs),
    /// Train a model (or the matched-width baseline) on a dataset file.
    Train(TrainArgs),
    /// Run the property suites (gradient checks, oracles, invariants).
    Verify(VerifyArgs),
    /// Dump per-block feature maps and statistics for one sample.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset file.
    #[arg(long, default_value = "dlpl-bench.dlpd")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Corner-jitter fraction for the training split, in [0, 1].
    #[arg(long)]
    warp_train: Option<f64>,
    /// Corner-jitter fraction for the test split, in [0, 1].
    #[arg(long)]
    warp_test: Option<f64>,
    #[arg(long)]
    img_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config document (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for history.csv and checkpoint.dlpl.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Swap every perspective block for a plain self-attention block.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads for evaluation. Training itself is single-threaded;
    /// histories are bitwise reproducible at any thread count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only suites whose name contains this substring.
    #[arg(long)]
    suite: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; the sample comes from its test split.
    #[arg(long)]
    data: PathBuf,
    /// Config document matching the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample_index: usize,
    #[arg(long, default_value = "dlpl-inspect")]
    out_dir: PathBuf,
    /// Evaluate the checkpoint at this schedule epoch (defaults to the
    /// final epoch).
    #[arg(long)]
    epoch: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet = 0,
    Info = 1,
    Debug = 2,
}

fn log_level() -> LogLevel {
    match std::env::var("DLPL_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= LogLevel::Info {
            eprintln!($($arg)*);
        }
    };
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                // bad values in flags or config documents are usage errors
                Error::Config(_) => ExitCode::from(2),
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

type CmdResult = Result<ExitCode, Error>;

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let defaults = ModelConfig::default();
    let n_train = args.n_train.unwrap_or(defaults.n_train);
    let n_test = args.n_test.unwrap_or(defaults.n_test);
    let warp_train = args.warp_train.unwrap_or(defaults.warp_train);
    let warp_test = args.warp_test.unwrap_or(defaults.warp_test);
    let img_size = args.img_size.unwrap_or(defaults.img_size);
    let num_classes = args.num_classes.unwrap_or(defaults.num_classes);
    info!(
        "generating {n_train}+{n_test} samples at {img_size}x{img_size}, warps {warp_train}/{warp_test}, seed {}",
        args.seed
    );
    let ds = generate_dataset(
        n_train,
        n_test,
        num_classes,
        img_size,
        warp_train,
        warp_test,
        args.seed,
    )?;
    save_dataset(&args.out, &ds)?;
    info!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_run_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.model.epochs = epochs;
    }
    cfg.model.validate()?;

    let data_path = args
        .data
        .clone()
        .or(cfg.data.clone())
        .ok_or_else(|| Error::Input("no dataset given (use --data or the config)".into()))?;
    if !data_path.exists() {
        return Err(Error::Input(format!(
            "dataset {} does not exist (generate one with `dlpl gen-data`)",
            data_path.display()
        )));
    }
    let ds = load_dataset(&data_path)?;

    let out_dir = args.out_dir.clone().or(cfg.out_dir.clone());
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        // the exact settings used, for reproduction and for inspect
        let mut echo = cfg.clone();
        echo.data = Some(data_path.clone());
        echo.out_dir = Some(dir.clone());
        echo.save(&dir.join("config.toml"))?;
    }

    info!(
        "training {} model: {} epochs, {} train / {} test, seed {}",
        if args.baseline { "baseline" } else { "dlpl" },
        cfg.model.epochs,
        ds.train.len(),
        ds.test.len(),
        cfg.model.seed
    );
    let mut model = build_model(&cfg.model, args.baseline)?;
    let report = model.param_report();
    info!(
        "parameters: stem {} + blocks {} + head {} = {}",
        report.stem, report.blocks, report.head, report.total
    );

    let opts = TrainOptions {
        out_dir: out_dir.as_deref(),
        eval_threads: args.threads.max(1),
        progress: Some(Box::new(|r: &dlpl_core::harness::EpochRecord| {
            info!(
                "epoch {}: task {:.4} rec {:.4} total {:.4} train mIoU {:.4} test mIoU {:.4} [{}]",
                r.epoch, r.task_loss, r.rec_loss, r.total, r.train_miou, r.test_miou, r.mode
            );
        })),
    };
    let history = train(&mut model, &ds, opts)?;

    if let Some(dir) = &out_dir {
        info!(
            "wrote {} and {}",
            dir.join("history.csv").display(),
            dir.join("checkpoint.dlpl").display()
        );
    } else {
        // no output directory: print the history instead
        print!("{}", history_csv(&history));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let reports = verify::run_all(args.suite.as_deref())?;
    let mut all_ok = true;
    for report in &reports {
        println!(
            "[{}] suite {}",
            if report.passed { "PASS" } else { "FAIL" },
            report.name
        );
        for (label, ok) in &report.checks {
            if log_level() >= LogLevel::Debug || !ok {
                println!("  [{}] {}", if *ok { "ok" } else { "FAIL" }, label);
            }
        }
        all_ok &= report.passed;
    }
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Input("verification failed".into()))
    }
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(p) => load_run_config(Some(p))?,
        None => {
            // look for the config the train command wrote next to the
            // checkpoint
            let sibling = args
                .checkpoint
                .parent()
                .map(|d| d.join("config.toml"))
                .filter(|p| p.exists());
            match sibling {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            }
        }
    };
    let ds = load_dataset(&args.data)?;
    if args.sample_index >= ds.test.len() {
        return Err(Error::Config(format!(
            "--sample-index {} out of range: the test split has {} samples",
            args.sample_index,
            ds.test.len()
        )));
    }
    let mut model = build_model(&cfg.model, false)?;
    model.load_checkpoint(&args.checkpoint)?;
    let epoch = args.epoch.unwrap_or(cfg.model.epochs.saturating_sub(1));
    let schedule = model.schedule_at(epoch);
    let sample = &ds.test[args.sample_index];

    let (files, stats) = dump_feature_maps(&model, sample, &schedule, &args.out_dir)?;
    info!("wrote {} graymaps to {}", files.len(), args.out_dir.display());
    for s in &stats {
        let entropy = s
            .responsibility_entropy
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "block {}: mode {} rec_loss {:.5} responsibility_entropy {} degenerate {}",
            s.block, s.mode, s.rec_loss, entropy, s.degenerate
        );
    }

    let metrics = evaluate(&model, &ds.test, &schedule, 1)?;
    let per_class: Vec<String> = metrics
        .per_class
        .iter()
        .map(|c| c.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()))
        .collect();
    println!(
        "test mIoU {:.4} (per class: {})",
        metrics.miou,
        per_class.join(", ")
    );
    Ok(ExitCode::SUCCESS)
}
