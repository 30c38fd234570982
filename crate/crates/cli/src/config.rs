//! Run configuration: defaults, a sectioned `key = value` file, the
//! `MMIXER_SEED` environment variable, then command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! seed = 1            # keys before any section belong to [run]
//! [task]
//! kind = xor
//! [model]
//! content = cfem
//! fusion = bank
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmixer::experiment::{model_for_task, AblationConfig};
use mmixer::synthdata::TaskSpec;
use mmixer::train::TrainConfig;
use mmixer::{AdamConfig, ContentMode, FusionMode, ModelConfig, Parallelism};

pub const SEED_ENV: &str = "MMIXER_SEED";

/// A configuration or command-line mistake. Reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root seed for the data, the split, the initialisation and the shuffles.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Metrics CSV file name, relative to `out_dir`.
    pub metrics: String,
    pub data_cache: Option<PathBuf>,
    pub parallelism: Parallelism,
    /// Fit per-stream probe heads after training.
    pub probes: bool,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe_train: TrainConfig,
    pub ablate_seeds: Vec<u64>,
    pub ablate_rows: Vec<(ContentMode, FusionMode)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            metrics: "metrics.csv".into(),
            data_cache: None,
            parallelism: Parallelism::Auto,
            probes: true,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe_train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                shards: 1,
                ..TrainConfig::default()
            },
            ablate_seeds: vec![1, 2, 3],
            ablate_rows: AblationConfig::full_grid(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value '{value}' for {key}")))
}

fn parse_mode<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T, UsageError> {
    value.parse().map_err(|e: String| usage(format!("{key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(usage(format!("invalid value '{value}' for {key} (expected true or false)"))),
    }
}

/// Parses `content+fusion`, e.g. `cfem+bank`.
pub fn parse_row(s: &str) -> Result<(ContentMode, FusionMode), UsageError> {
    let (c, f) = s
        .split_once('+')
        .ok_or_else(|| usage(format!("ablation row '{s}' must look like content+fusion")))?;
    Ok((parse_mode("ablate.rows", c.trim())?, parse_mode("ablate.rows", f.trim())?))
}

fn parse_list<T>(value: &str, item: impl Fn(&str) -> Result<T, UsageError>) -> Result<Vec<T>, UsageError> {
    value.split(',').map(|s| item(s.trim())).collect()
}

impl RunConfig {
    /// Every settable key, as `section.key`.
    pub const KEYS: &'static [&'static str] = &[
        "run.seed",
        "run.out_dir",
        "run.metrics",
        "run.data_cache",
        "run.parallelism",
        "run.probes",
        "task.kind",
        "task.modalities",
        "task.frames",
        "task.d_f",
        "task.height",
        "task.width",
        "task.classes",
        "task.noise",
        "task.amplitude",
        "task.bump_width",
        "task.train_samples",
        "task.test_samples",
        "model.content",
        "model.fusion",
        "model.d_h",
        "model.bank_size",
        "model.heads",
        "model.precision",
        "model.pos_on_values",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.shards",
        "probe.epochs",
        "probe.batch_size",
        "probe.lr",
        "ablate.seeds",
        "ablate.rows",
    ];

    /// Sets one `section.key`. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.metrics" => self.metrics = v.to_string(),
            "run.data_cache" => self.data_cache = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run.parallelism" => {
                self.parallelism = match v {
                    "auto" => Parallelism::Auto,
                    "sequential" => Parallelism::Sequential,
                    _ => return Err(usage(format!("invalid value '{v}' for {key} (expected auto or sequential)"))),
                }
            }
            "run.probes" => self.probes = parse_bool(key, v)?,
            "task.kind" => self.task.kind = parse_mode(key, v)?,
            "task.modalities" => self.task.n_modalities = parse(key, v)?,
            "task.frames" => self.task.frames = parse(key, v)?,
            "task.d_f" => self.task.d_f = parse(key, v)?,
            "task.height" => self.task.height = parse(key, v)?,
            "task.width" => self.task.width = parse(key, v)?,
            "task.classes" => self.task.classes = parse(key, v)?,
            "task.noise" => self.task.noise = parse(key, v)?,
            "task.amplitude" => self.task.amplitude = parse(key, v)?,
            "task.bump_width" => self.task.bump_width = parse(key, v)?,
            "task.train_samples" => self.task.train_samples = parse(key, v)?,
            "task.test_samples" => self.task.test_samples = parse(key, v)?,
            "model.content" => self.model.content = parse_mode(key, v)?,
            "model.fusion" => self.model.fusion = parse_mode(key, v)?,
            "model.d_h" => self.model.d_h = parse(key, v)?,
            "model.bank_size" => self.model.bank_size = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.precision" => self.model.precision = parse_mode(key, v)?,
            "model.pos_on_values" => self.model.pos_on_values = parse_bool(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.shards" => self.train.shards = parse(key, v)?,
            "probe.epochs" => self.probe_train.epochs = parse(key, v)?,
            "probe.batch_size" => self.probe_train.batch_size = parse(key, v)?,
            "probe.lr" => self.probe_train.adam.lr = parse(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(v, |s| parse(key, s))?,
            "ablate.rows" => {
                self.ablate_rows = if v == "all" {
                    AblationConfig::full_grid()
                } else {
                    parse_list(v, parse_row)?
                }
            }
            _ => {
                let section = key.split_once('.').map_or("run", |(s, _)| s);
                let known: Vec<&str> = Self::KEYS
                    .iter()
                    .filter_map(|k| k.strip_prefix(section).and_then(|r| r.strip_prefix('.')))
                    .collect();
                let hint = if known.is_empty() {
                    "sections are run, task, model, train, probe and ablate".to_string()
                } else {
                    format!("[{section}] accepts {}", known.join(", "))
                };
                return Err(usage(format!("unknown config key '{key}' ({hint})")));
            }
        }
        Ok(())
    }

    /// Applies the text of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), UsageError> {
        let mut section = String::from("run");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| usage(format!("{origin}:{}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header '{line}'")))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got '{line}'")))?;
            self.set(&format!("{section}.{}", k.trim()), v)
                .map_err(|e| at(e.0))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())?;
        Ok(())
    }

    /// Reads the seed override from the environment, if set.
    pub fn apply_env(&mut self, value: Option<&str>) -> Result<(), UsageError> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("invalid {SEED_ENV} value '{v}'")))?;
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), UsageError> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("override '{s}' must look like section.key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Task spec carrying the root seed.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    /// Model config sized for the task, seeded from the root seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..model_for_task(&self.task, &self.model)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            parallelism: self.parallelism,
            ..self.train.clone()
        }
    }

    pub fn probe_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            parallelism: self.parallelism,
            ..self.probe_train.clone()
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            task: self.task.clone(),
            model: self.model.clone(),
            train: self.train_config(),
            probe_train: self.probe_config(),
            seeds: self.ablate_seeds.clone(),
            rows: self.ablate_rows.clone(),
            parallelism: self.parallelism,
        }
    }

    /// Checks every constraint before anything is allocated.
    pub fn validate(&self) -> mmixer::Result<()> {
        self.task_spec().validate()?;
        self.model_config().validate()?;
        for &(content, fusion) in &self.ablate_rows {
            ModelConfig {
                content,
                fusion,
                ..self.model_config()
            }
            .validate()?;
        }
        self.train_config().validate()?;
        self.probe_config().validate()
    }

    /// The resolved configuration in file form. Reading it back gives an
    /// equal config.
    pub fn to_text(&self) -> String {
        let t = &self.task;
        let m = &self.model;
        let tr = &self.train;
        let p = &self.probe_train;
        let rows: Vec<String> = self.ablate_rows.iter().map(|(c, f)| format!("{c}+{f}")).collect();
        let seeds: Vec<String> = self.ablate_seeds.iter().map(u64::to_string).collect();
        let mut s = String::from("[run]\n");
        s += &format!("seed = {}\n", self.seed);
        s += &format!("out_dir = {}\n", self.out_dir.display());
        s += &format!("metrics = {}\n", self.metrics);
        s += &format!(
            "data_cache = {}\n",
            self.data_cache.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        s += &format!(
            "parallelism = {}\n",
            if self.parallelism == Parallelism::Auto { "auto" } else { "sequential" }
        );
        s += &format!("probes = {}\n", self.probes);
        s += &format!(
            "\n[task]\nkind = {}\nmodalities = {}\nframes = {}\nd_f = {}\nheight = {}\nwidth = {}\nclasses = {}\nnoise = {}\namplitude = {}\nbump_width = {}\ntrain_samples = {}\ntest_samples = {}\n",
            t.kind.as_str(),
            t.n_modalities,
            t.frames,
            t.d_f,
            t.height,
            t.width,
            t.classes,
            t.noise,
            t.amplitude,
            t.bump_width,
            t.train_samples,
            t.test_samples
        );
        s += &format!(
            "\n[model]\ncontent = {}\nfusion = {}\nd_h = {}\nbank_size = {}\nheads = {}\nprecision = {}\npos_on_values = {}\n",
            m.content,
            m.fusion,
            m.d_h,
            m.bank_size,
            m.heads,
            m.precision.as_str(),
            m.pos_on_values
        );
        s += &format!(
            "\n[train]\nepochs = {}\nbatch_size = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nshards = {}\n",
            tr.epochs, tr.batch_size, tr.adam.lr, tr.adam.beta1, tr.adam.beta2, tr.adam.eps, tr.shards
        );
        s += &format!(
            "\n[probe]\nepochs = {}\nbatch_size = {}\nlr = {}\n",
            p.epochs, p.batch_size, p.adam.lr
        );
        s += &format!("\n[ablate]\nseeds = {}\nrows = {}\n", seeds.join(","), rows.join(","));
        s
    }
}
