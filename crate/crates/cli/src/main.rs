//! `mmixer` command-line driver.
//!
//! Exit status: 0 on success, 1 when a check fails or a run diverges, 2 for
//! usage, configuration and I/O errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, UsageError, SEED_ENV};

#[derive(Parser)]
#[command(name = "mmixer", version, about = "Train, evaluate and check M-Mixer sequence classifiers")]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, writing metrics and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Skip fitting per-stream probe heads after training.
        #[arg(long)]
        no_probes: bool,
    },
    /// Evaluate a checkpoint on the test (or train) split.
    Eval {
        /// Checkpoint file. A run.cfg next to it is used when --config is absent.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test", value_parser = ["test", "train"])]
        split: String,
        /// Also write the metrics as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare every gradient with central differences on a small 64-bit model.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "cfem")]
        content: String,
        #[arg(long, default_value = "bank")]
        fusion: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Corrupt the update-gate gradient; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Train the content x fusion grid with per-stream probes and print a table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds; rows sharing a seed share data and split.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated content+fusion rows, or "all".
        #[arg(long)]
        rows: Option<String>,
        /// Table file (default: <out>/ablation.tsv).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and write it as a cache file.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Cache file to write.
        #[arg(long)]
        path: PathBuf,
    },
}

/// Options shared by the commands that take a run configuration. Dedicated
/// flags win over `--set`, which wins over the environment and the file.
#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines grouped in [sections].
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    content: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset cache file, reused when it matches the task.
    #[arg(long)]
    data_cache: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn resolve(&self, fallback_file: Option<PathBuf>) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = self.config.clone().or(fallback_file) {
            cfg.load_file(&path)?;
        }
        cfg.apply_env(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.apply_overrides(&self.set)?;
        let mut flags: Vec<(&str, String)> = Vec::new();
        let mut flag = |key, v: Option<String>| {
            if let Some(v) = v {
                flags.push((key, v));
            }
        };
        flag("run.seed", self.seed.map(|v| v.to_string()));
        flag("task.kind", self.task.clone());
        flag("model.content", self.content.clone());
        flag("model.fusion", self.fusion.clone());
        flag("train.epochs", self.epochs.map(|v| v.to_string()));
        flag("train.batch_size", self.batch_size.map(|v| v.to_string()));
        flag("train.lr", self.lr.map(|v| v.to_string()));
        flag("model.d_h", self.d_h.map(|v| v.to_string()));
        flag("model.precision", self.precision.clone());
        flag("run.out_dir", self.out.as_ref().map(|p| p.display().to_string()));
        flag("run.data_cache", self.data_cache.as_ref().map(|p| p.display().to_string()));
        if self.sequential {
            flags.push(("run.parallelism", "sequential".into()));
        }
        for (k, v) in flags {
            cfg.set(k, &v).map_err(|e| UsageError(format!("--{}: {}", k.rsplit('.').next().unwrap_or(k), e.0)))?;
        }
        Ok(cfg)
    }
}

fn library_code(e: &mmixer::Error) -> u8 {
    match e {
        mmixer::Error::Io(_)
        | mmixer::Error::Config { .. }
        | mmixer::Error::SequenceTooShort { .. }
        | mmixer::Error::Checkpoint(_)
        | mmixer::Error::Cache(_) => 2,
        mmixer::Error::Context { source, .. } => library_code(source),
        _ => 1,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mmixer::Error>() {
            return library_code(e);
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { run, no_probes } => {
            let mut cfg = run.resolve(None)?;
            if no_probes {
                cfg.probes = false;
            }
            commands::train(&cfg)
        }
        Command::Eval {
            checkpoint,
            run,
            split,
            csv,
        } => {
            if !checkpoint.is_file() {
                return Err(UsageError(format!("checkpoint not found: {}", checkpoint.display())).into());
            }
            let sibling = checkpoint.with_file_name(commands::RUN_CONFIG);
            let cfg = run.resolve(sibling.is_file().then_some(sibling))?;
            commands::eval(&cfg, &checkpoint, &split, csv.as_deref())
        }
        Command::Gradcheck {
            seed,
            content,
            fusion,
            tolerance,
            step,
            inject_fault,
            sequential,
        } => {
            let mut cfg = RunConfig::default();
            cfg.apply_env(std::env::var(SEED_ENV).ok().as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            cfg.set("model.content", &content)?;
            cfg.set("model.fusion", &fusion)?;
            commands::gradcheck(&commands::GradcheckArgs {
                seed,
                content: cfg.model.content,
                fusion: cfg.model.fusion,
                tolerance,
                step,
                inject_fault,
                sequential,
            })
        }
        Command::Ablate { run, seeds, rows, table } => {
            let mut cfg = run.resolve(None)?;
            if let Some(s) = seeds {
                cfg.set("ablate.seeds", &s)?;
            }
            if let Some(r) = rows {
                cfg.set("ablate.rows", &r)?;
            }
            commands::ablate(&cfg, table)
        }
        Command::GenData { run, path } => {
            let cfg = run.resolve(None)?;
            commands::gen_data(&cfg, &path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
