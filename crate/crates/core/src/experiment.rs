//! Training runs and the content × fusion ablation grid.

use crate::adam::AdamState;
use crate::error::Result;
use crate::exec::{map_ordered, Parallelism};
use crate::network::{ContentMode, FusionMode, Model, ModelConfig, ProbeHeads};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Split, TaskSpec};
use crate::train::{evaluate, evaluate_probes, train_epoch, train_probes, Metrics, ProbeMetrics, TrainConfig};

/// Model config whose input dimensions match `task`.
pub fn model_for_task(task: &TaskSpec, template: &ModelConfig) -> ModelConfig {
    ModelConfig {
        n_modalities: task.n_modalities,
        frames: task.frames,
        d_f: task.d_f,
        height: task.height,
        width: task.width,
        classes: task.classes,
        ..template.clone()
    }
}

/// Per-epoch record handed to [`fit`] observers. Epoch 0 is the untrained
/// model and has no training metrics.
pub struct EpochReport<'a> {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train: Option<&'a Metrics>,
    pub test: &'a Metrics,
}

pub struct FitResult<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub final_test: Metrics,
    pub best_test: Metrics,
    pub best_epoch: usize,
}

/// Trains for `train.epochs` epochs, evaluating on the test split before the
/// first epoch and after each one.
pub fn fit<T: Scalar>(
    mut model: Model<T>,
    data: &Dataset,
    split: &Split,
    train: &TrainConfig,
    mut observe: impl FnMut(&EpochReport<'_>, &Model<T>, &AdamState<T>) -> Result<()>,
) -> Result<FitResult<T>> {
    let mut adam = AdamState::new(model.params(), train.adam)?;
    let eval_batch = 64;
    let initial = evaluate(&model, data, &split.test, eval_batch, train.parallelism)?;
    observe(
        &EpochReport {
            epoch: 0,
            steps: 0,
            train: None,
            test: &initial,
        },
        &model,
        &adam,
    )?;
    let mut best = (initial.clone(), 0);
    let mut last = initial;
    let steps_per_epoch = split.train.len().div_ceil(train.batch_size.max(1));
    for epoch in 1..=train.epochs {
        let tm = train_epoch(&mut model, &mut adam, data, &split.train, train, epoch)?;
        last = evaluate(&model, data, &split.test, eval_batch, train.parallelism)?;
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4}",
            tm.loss,
            tm.accuracy,
            last.loss,
            last.accuracy
        );
        observe(
            &EpochReport {
                epoch,
                steps: epoch * steps_per_epoch,
                train: Some(&tm),
                test: &last,
            },
            &model,
            &adam,
        )?;
        if last.accuracy > best.0.accuracy {
            best = (last.clone(), epoch);
        }
    }
    Ok(FitResult {
        model,
        adam,
        final_test: last,
        best_test: best.0,
        best_epoch: best.1,
    })
}

/// Header of the metrics CSV: `step,split,loss,acc,acc_c0,...`.
pub fn metrics_csv_header(classes: usize) -> String {
    let mut h = String::from("step,split,loss,acc");
    for k in 0..classes {
        h += &format!(",acc_c{k}");
    }
    h
}

/// One metrics CSV line. Floats use the shortest exact decimal form, so equal
/// runs give equal bytes.
pub fn metrics_csv_row(step: usize, split: &str, m: &Metrics) -> String {
    let mut r = format!("{step},{split},{},{}", m.loss, m.accuracy);
    for a in &m.per_class {
        r += &format!(",{a}");
    }
    r
}

/// CSV lines for one [`EpochReport`]: the training pass (if any) then the
/// test evaluation.
pub fn metrics_csv_lines(report: &EpochReport<'_>) -> Vec<String> {
    let mut out = Vec::with_capacity(2);
    if let Some(t) = report.train {
        out.push(metrics_csv_row(report.steps, "train", t));
    }
    out.push(metrics_csv_row(report.steps, "test", report.test));
    out
}

/// Fits probe heads on the frozen model and scores them on the test split.
pub fn probe_run<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    split: &Split,
    train: &TrainConfig,
) -> Result<(ProbeHeads<T>, ProbeMetrics)> {
    let c = model.config();
    let mut probes = ProbeHeads::new(c.n_modalities, c.d_h, c.classes, c.seed ^ 0x50_52_4F_42)?;
    train_probes(model, &mut probes, data, &split.train, train)?;
    let m = evaluate_probes(model, &probes, data, &split.test, train.parallelism)?;
    Ok((probes, m))
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe_train: TrainConfig,
    /// Each seed drives the data, the split, the model init and the shuffles.
    pub seeds: Vec<u64>,
    pub rows: Vec<(ContentMode, FusionMode)>,
    /// How runs fan out; the per-run gradient shards then run sequentially.
    pub parallelism: Parallelism,
}

impl AblationConfig {
    pub fn full_grid() -> Vec<(ContentMode, FusionMode)> {
        ContentMode::ALL
            .iter()
            .flat_map(|&c| FusionMode::ALL.iter().map(move |&f| (c, f)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub test_accuracy: f64,
    pub stream_accuracy: Vec<f64>,
    pub split_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub content: ContentMode,
    pub fusion: FusionMode,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.test_accuracy))
    }

    pub fn mean_stream_accuracy(&self, stream: usize) -> f64 {
        mean(self.runs.iter().map(|r| r.stream_accuracy[stream]))
    }

    /// Split hashes of all seeds, joined.
    pub fn split_hash(&self) -> String {
        self.runs.iter().map(|r| r.split_hash.as_str()).collect::<Vec<_>>().join("+")
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub streams: usize,
}

impl AblationTable {
    pub fn header(streams: usize) -> String {
        let mut h = String::from("content\tfusion\ttest_acc");
        for i in 0..streams {
            h += &format!("\tstream{i}_acc");
        }
        h + "\tsplit_hash"
    }

    /// Tab-separated table, accuracies in percent.
    pub fn to_tsv(&self) -> String {
        let mut s = Self::header(self.streams) + "\n";
        for r in &self.rows {
            s += &format!("{}\t{}\t{:.2}", r.content, r.fusion, 100.0 * r.mean_accuracy());
            for i in 0..self.streams {
                s += &format!("\t{:.2}", 100.0 * r.mean_stream_accuracy(i));
            }
            s += &format!("\t{}\n", r.split_hash());
        }
        s
    }

    pub fn row(&self, content: ContentMode, fusion: FusionMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.content == content && r.fusion == fusion)
    }
}

/// One grid cell for one seed: train the model, then fit frozen probes.
pub fn ablation_run<T: Scalar>(
    cfg: &AblationConfig,
    content: ContentMode,
    fusion: FusionMode,
    seed: u64,
    data: &Dataset,
    split: &Split,
) -> Result<RunResult> {
    let model_cfg = ModelConfig {
        content,
        fusion,
        seed,
        ..model_for_task(&cfg.task, &cfg.model)
    };
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    // Only the final model is reported, so there is no per-epoch evaluation.
    let mut model = Model::<T>::new(model_cfg)?;
    let mut adam = AdamState::new(model.params(), train.adam)?;
    for epoch in 1..=train.epochs {
        let m = train_epoch(&mut model, &mut adam, data, &split.train, &train, epoch)?;
        log::debug!("{content}+{fusion} seed {seed} epoch {epoch}: train acc {:.4}", m.accuracy);
    }
    let test = evaluate(&model, data, &split.test, 64, train.parallelism)?;
    let probe_train = TrainConfig {
        seed,
        ..cfg.probe_train.clone()
    };
    let (_, probes) = probe_run(&model, data, split, &probe_train)?;
    log::info!(
        "{content}+{fusion} seed {seed}: test {:.4}, streams {:?}",
        test.accuracy,
        probes.stream_accuracy
    );
    Ok(RunResult {
        seed,
        test_accuracy: test.accuracy,
        stream_accuracy: probes.stream_accuracy,
        split_hash: split.hash(),
    })
}

/// Trains every (row, seed) pair. Rows sharing a seed see the same data and
/// split.
pub fn run_ablation<T: Scalar>(cfg: &AblationConfig) -> Result<AblationTable> {
    for &(content, fusion) in &cfg.rows {
        ModelConfig {
            content,
            fusion,
            ..model_for_task(&cfg.task, &cfg.model)
        }
        .validate()?;
    }
    let datasets = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let spec = TaskSpec {
                seed,
                ..cfg.task.clone()
            };
            let d = Dataset::generate(&spec)?;
            let s = d.train_test()?;
            Ok((d, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.rows.len())
        .flat_map(|r| (0..cfg.seeds.len()).map(move |s| (r, s)))
        .collect();
    let inner = if cfg.parallelism.is_parallel() && jobs.len() > 1 {
        Parallelism::Sequential
    } else {
        cfg.train.parallelism
    };
    let local = AblationConfig {
        train: TrainConfig {
            parallelism: inner,
            ..cfg.train.clone()
        },
        probe_train: TrainConfig {
            parallelism: inner,
            ..cfg.probe_train.clone()
        },
        ..cfg.clone()
    };
    let results = map_ordered(cfg.parallelism, jobs, |(r, s)| {
        let (content, fusion) = local.rows[r];
        let (data, split) = &datasets[s];
        ablation_run::<T>(&local, content, fusion, local.seeds[s], data, split)
    });
    let mut rows: Vec<AblationRow> = cfg
        .rows
        .iter()
        .map(|&(content, fusion)| AblationRow {
            content,
            fusion,
            runs: Vec::new(),
        })
        .collect();
    let mut it = results.into_iter();
    for row in rows.iter_mut() {
        for _ in &cfg.seeds {
            row.runs.push(it.next().unwrap()?);
        }
    }
    Ok(AblationTable {
        rows,
        streams: cfg.task.n_modalities,
    })
}
