//! The subcommands. Each returns the process exit status on success; errors
//! are classified by `main`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use mmixer::autodiff::Fault;
use mmixer::checkpoint;
use mmixer::experiment::{fit, metrics_csv_header, metrics_csv_lines, metrics_csv_row, probe_run, run_ablation};
use mmixer::gradcheck::{run_gradcheck, GradcheckConfig};
use mmixer::synthdata::Dataset;
use mmixer::train::{evaluate, evaluate_probes, Metrics};
use mmixer::{ContentMode, FusionMode, Model, ModelConfig, Parallelism, Precision, Scalar};

use crate::config::{RunConfig, UsageError};

/// Resolved configuration written beside every run's artifacts.
pub const RUN_CONFIG: &str = "run.cfg";
const EVAL_BATCH: usize = 64;

fn create_out_dir(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join(RUN_CONFIG);
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let spec = cfg.task_spec();
    Ok(match &cfg.data_cache {
        Some(path) => Dataset::load_or_generate(path, &spec).with_context(|| format!("dataset cache {}", path.display()))?,
        None => Dataset::generate_with(&spec, cfg.parallelism)?,
    })
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<ExitCode> {
    cfg.validate()?;
    match cfg.model.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> anyhow::Result<ExitCode> {
    create_out_dir(cfg)?;
    let data = load_data(cfg)?;
    let split = data.train_test()?;
    let model = Model::<T>::new(cfg.model_config())?;
    let train = cfg.train_config();

    let metrics_path = cfg.out_dir.join(&cfg.metrics);
    let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", metrics_csv_header(cfg.task.classes))?;
    let last = cfg.out_dir.join("last.mmx");
    let best = cfg.out_dir.join("best.mmx");
    let mut best_acc = f64::NEG_INFINITY;

    let fitted = fit(model, &data, &split, &train, |report, model, adam| {
        for line in metrics_csv_lines(report) {
            writeln!(csv, "{line}")?;
        }
        csv.flush()?;
        // The rolling checkpoint is what survives a divergence.
        checkpoint::save(&last, model, Some(adam), None)?;
        if report.test.accuracy > best_acc {
            best_acc = report.test.accuracy;
            checkpoint::save(&best, model, Some(adam), None)?;
        }
        Ok(())
    });
    let fitted = match fitted {
        Ok(f) => f,
        Err(e) => {
            eprintln!("training aborted; last good state kept in {}", last.display());
            return Err(e.into());
        }
    };

    let probes = if cfg.probes && train.epochs > 0 {
        let (heads, m) = probe_run(&fitted.model, &data, &split, &cfg.probe_config())?;
        Some((heads, m))
    } else {
        None
    };
    let final_path = cfg.out_dir.join("final.mmx");
    checkpoint::save(&final_path, &fitted.model, Some(&fitted.adam), probes.as_ref().map(|p| &p.0))?;

    println!("final test accuracy: {}", fitted.final_test.accuracy);
    println!(
        "best test accuracy: {} (epoch {})",
        fitted.best_test.accuracy, fitted.best_epoch
    );
    if let Some((_, m)) = &probes {
        for (i, a) in m.stream_accuracy.iter().enumerate() {
            println!("probe stream {i} accuracy: {a}");
        }
    }
    println!("wrote {} and {}", metrics_path.display(), final_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Fails, naming the field, when the task's inputs do not fit the model.
fn check_task_fits(cfg: &RunConfig, model: &ModelConfig) -> Result<(), UsageError> {
    let t = &cfg.task;
    let pairs = [
        ("modalities", t.n_modalities, model.n_modalities),
        ("frames", t.frames, model.frames),
        ("d_f", t.d_f, model.d_f),
        ("height", t.height, model.height),
        ("width", t.width, model.width),
        ("classes", t.classes, model.classes),
    ];
    for (name, task, ckpt) in pairs {
        if task != ckpt {
            return Err(UsageError(format!(
                "task.{name} = {task} but the checkpoint was trained with {ckpt}"
            )));
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, path: &Path, split_name: &str, csv: Option<&Path>) -> anyhow::Result<ExitCode> {
    match checkpoint::stored_precision(path)? {
        Precision::F32 => eval_as::<f32>(cfg, path, split_name, csv),
        Precision::F64 => eval_as::<f64>(cfg, path, split_name, csv),
    }
}

fn print_metrics(m: &Metrics) {
    println!("samples: {}", m.samples);
    println!("loss: {}", m.loss);
    println!("top1: {}", m.accuracy);
    for (k, (a, n)) in m.per_class.iter().zip(&m.class_counts).enumerate() {
        println!("acc_c{k}: {a} (n={n})");
    }
}

fn eval_as<T: Scalar>(cfg: &RunConfig, path: &Path, split_name: &str, csv: Option<&Path>) -> anyhow::Result<ExitCode> {
    let ck = checkpoint::load::<T>(path)?;
    check_task_fits(cfg, &ck.config)?;
    cfg.task_spec().validate()?;
    let model = ck.model()?;
    let data = load_data(cfg)?;
    let split = data.train_test()?;
    let indices = if split_name == "train" { &split.train } else { &split.test };
    let m = evaluate(&model, &data, indices, EVAL_BATCH, cfg.parallelism)?;
    let step = ck.adam.as_ref().map_or(0, |a| a.step as usize);
    println!("checkpoint: {} (step {step})", path.display());
    println!("split: {split_name}");
    print_metrics(&m);
    if let Some(probes) = ck.probes()? {
        let pm = evaluate_probes(&model, &probes, &data, indices, cfg.parallelism)?;
        for (i, a) in pm.stream_accuracy.iter().enumerate() {
            println!("probe stream {i} accuracy: {a}");
        }
    }
    if let Some(out) = csv {
        let text = format!(
            "{}\n{}\n",
            metrics_csv_header(m.per_class.len()),
            metrics_csv_row(step, split_name, &m)
        );
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub struct GradcheckArgs {
    pub seed: u64,
    pub content: ContentMode,
    pub fusion: FusionMode,
    pub tolerance: f64,
    pub step: f64,
    pub inject_fault: bool,
    pub sequential: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let cfg = GradcheckConfig {
        model: ModelConfig {
            content: args.content,
            fusion: args.fusion,
            seed: args.seed,
            ..ModelConfig::toy()
        },
        tolerance: args.tolerance,
        step: args.step,
        fault: args.inject_fault.then_some(Fault::FlipUpdateGateGrad),
        parallelism: if args.sequential { Parallelism::Sequential } else { Parallelism::Auto },
        seed: args.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.render());
    if report.passed() {
        println!(
            "gradcheck passed: max relative error {:.3e} over {} tensors in {:.1?}",
            report.max_rel(),
            report.tensors.len(),
            report.elapsed
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradcheck FAILED: {} above tolerance {:e}",
            report.failing_groups().join(", "),
            report.tolerance
        );
        Ok(ExitCode::from(1))
    }
}

pub fn ablate(cfg: &RunConfig, table: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    cfg.validate()?;
    if cfg.ablate_seeds.is_empty() {
        return Err(UsageError("ablate.seeds must name at least one seed".into()).into());
    }
    create_out_dir(cfg)?;
    let ab = cfg.ablation_config();
    let result = match cfg.model.precision {
        Precision::F32 => run_ablation::<f32>(&ab)?,
        Precision::F64 => run_ablation::<f64>(&ab)?,
    };
    let tsv = result.to_tsv();
    print!("{tsv}");
    let path = table.unwrap_or_else(|| cfg.out_dir.join("ablation.tsv"));
    fs::write(&path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    Ok(ExitCode::SUCCESS)
}

pub fn gen_data(cfg: &RunConfig, path: &Path) -> anyhow::Result<ExitCode> {
    let spec = cfg.task_spec();
    spec.validate()?;
    let data = Dataset::generate_with(&spec, cfg.parallelism)?;
    data.save(path).with_context(|| format!("writing {}", path.display()))?;
    let digest: String = spec.digest().iter().map(|b| format!("{b:02x}")).collect();
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        data.len(),
        spec.train_samples,
        spec.test_samples,
        path.display()
    );
    println!("task digest: {digest}");
    Ok(ExitCode::SUCCESS)
}
