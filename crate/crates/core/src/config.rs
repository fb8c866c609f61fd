//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, reported
//! with their line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{marked_vocab_size, MarkedConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KvLine {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<KvLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                path: origin.to_string(),
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push(KvLine {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Inclusive budget grid `start:stop:step`, computed from integer multiples of
/// the step so that no rounding error accumulates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl BudgetGrid {
    pub const CANONICAL: BudgetGrid = BudgetGrid {
        start: 0.10,
        stop: 1.00,
        step: 0.05,
    };

    pub fn budgets(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        let scale = 1e6;
        let start = (self.start * scale).round();
        let step = (self.step * scale).round();
        (0..count).map(|i| (start + step * i as f64) / scale).collect()
    }
}

impl FromStr for BudgetGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(format!("budget grid `{s}` must be start:stop:step"));
        };
        let f = |x: &str| x.parse::<f64>().map_err(|e| format!("budget grid `{s}`: {e}"));
        let grid = BudgetGrid {
            start: f(a)?,
            stop: f(b)?,
            step: f(c)?,
        };
        if !(grid.start > 0.0 && grid.stop <= 1.0 && grid.start <= grid.stop && grid.step > 0.0) {
            return Err(format!("budget grid `{s}` must satisfy 0 < start <= stop <= 1, step > 0"));
        }
        Ok(grid)
    }
}

impl std::fmt::Display for BudgetGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Marked,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataParams {
    pub seq_len: usize,
    pub n_values: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub csv_path: Option<PathBuf>,
    pub csv_test_path: Option<PathBuf>,
    pub vocab_size: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            seq_len: 64,
            n_values: 8,
            train_size: 8192,
            val_size: 2048,
            test_size: 2000,
            csv_path: None,
            csv_test_path: None,
            vocab_size: 10_000,
        }
    }
}

impl DataParams {
    pub fn marked(&self) -> MarkedConfig {
        MarkedConfig {
            seq_len: self.seq_len,
            n_values: self.n_values,
            train_size: self.train_size,
            val_size: self.val_size,
            test_size: self.test_size,
        }
    }
}

/// Settings of the ordered reproduction stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub dense_epochs: usize,
    pub finetune_epochs: usize,
    pub scratch_epochs: usize,
    pub adapt_epochs: usize,
    pub adapt_learning_rate: f64,
    /// Cost weights for warm-started budgeted and static fine-tunes.
    pub rescue_lambda: f64,
    pub rescue_beta: f64,
    pub static_budgets: Vec<f64>,
    pub prune_budgets: Vec<f64>,
    pub sweep: BudgetGrid,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            dense_epochs: 32,
            finetune_epochs: 8,
            scratch_epochs: 32,
            adapt_epochs: 1,
            adapt_learning_rate: 3e-4,
            rescue_lambda: 0.05,
            rescue_beta: 4.0,
            static_budgets: vec![0.25, 0.5],
            prune_budgets: vec![0.5, 0.75],
            sweep: BudgetGrid::CANONICAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchParams {
    pub warmup: usize,
    pub repeats: usize,
    pub examples: usize,
    pub batch_size: usize,
    pub budgets: Vec<f64>,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            warmup: 2,
            repeats: 5,
            examples: 2000,
            batch_size: 64,
            budgets: vec![0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub data: DataParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stages: StageParams,
    pub bench: BenchParams,
    pub output_dir: PathBuf,
    /// Optimization seeds.
    pub seeds: Vec<u64>,
    /// Data-generation seeds for the dense reliability grid.
    pub data_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataParams::default();
        let model = ModelConfig {
            vocab_size: marked_vocab_size(data.n_values),
            seq_len: data.seq_len,
            ..ModelConfig::default()
        };
        Self {
            task: Task::Marked,
            data,
            model,
            train: TrainConfig::default(),
            stages: StageParams::default(),
            bench: BenchParams::default(),
            output_dir: PathBuf::from("runs/robust"),
            seeds: vec![7, 13, 21],
            data_seeds: vec![7, 13, 21],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses a configuration; keys absent from the text keep their defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut vocab_explicit = false;
        for kv in parse_kv(text, origin)? {
            if kv.key == "model.vocab_size" {
                vocab_explicit = true;
            }
            cfg.set(&kv.key, &kv.value).map_err(|message| Error::Config {
                path: origin.to_string(),
                line: kv.line,
                message,
            })?;
        }
        if cfg.task == Task::Marked && !vocab_explicit {
            cfg.model.vocab_size = marked_vocab_size(cfg.data.n_values);
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.seq_len != self.data.seq_len {
            return Err(Error::ModelConfig(format!(
                "model.seq_len {} differs from data.seq_len {}",
                self.model.seq_len, self.data.seq_len
            )));
        }
        if self.task == Task::Marked && self.model.vocab_size < marked_vocab_size(self.data.n_values) {
            return Err(Error::ModelConfig(format!(
                "model.vocab_size {} cannot hold the marked-task vocabulary of {}",
                self.model.vocab_size,
                marked_vocab_size(self.data.n_values)
            )));
        }
        if self.task == Task::Csv && self.data.csv_path.is_none() {
            return Err(Error::ModelConfig("task = csv needs data.csv_path".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::ModelConfig("run.seeds must not be empty".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        if let Some(k) = key.strip_prefix("train.") {
            return self.train.set(k, value);
        }
        let d = &mut self.data;
        let s = &mut self.stages;
        let b = &mut self.bench;
        match key {
            "task" => {
                self.task = match value {
                    "marked" => Task::Marked,
                    "csv" => Task::Csv,
                    other => return Err(format!("unknown task `{other}` (expected marked or csv)")),
                }
            }
            "data.seq_len" => d.seq_len = parse_value(key, value)?,
            "data.n_values" => d.n_values = parse_value(key, value)?,
            "data.train_size" => d.train_size = parse_value(key, value)?,
            "data.val_size" => d.val_size = parse_value(key, value)?,
            "data.test_size" => d.test_size = parse_value(key, value)?,
            "data.vocab_size" => d.vocab_size = parse_value(key, value)?,
            "data.csv_path" => d.csv_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.csv_test_path" => d.csv_test_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "stages.dense_epochs" => s.dense_epochs = parse_value(key, value)?,
            "stages.finetune_epochs" => s.finetune_epochs = parse_value(key, value)?,
            "stages.scratch_epochs" => s.scratch_epochs = parse_value(key, value)?,
            "stages.adapt_epochs" => s.adapt_epochs = parse_value(key, value)?,
            "stages.adapt_learning_rate" => s.adapt_learning_rate = parse_value(key, value)?,
            "stages.rescue_lambda" => s.rescue_lambda = parse_value(key, value)?,
            "stages.rescue_beta" => s.rescue_beta = parse_value(key, value)?,
            "stages.static_budgets" => s.static_budgets = parse_list(key, value)?,
            "stages.prune_budgets" => s.prune_budgets = parse_list(key, value)?,
            "stages.sweep" => s.sweep = parse_value(key, value)?,
            "bench.warmup" => b.warmup = parse_value(key, value)?,
            "bench.repeats" => b.repeats = parse_value(key, value)?,
            "bench.examples" => b.examples = parse_value(key, value)?,
            "bench.batch_size" => b.batch_size = parse_value(key, value)?,
            "bench.budgets" => b.budgets = parse_list(key, value)?,
            "run.output_dir" => self.output_dir = PathBuf::from(value),
            "run.seeds" => self.seeds = parse_list(key, value)?,
            "run.data_seeds" => self.data_seeds = parse_list(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Serializes every key; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let task = match self.task {
            Task::Marked => "marked",
            Task::Csv => "csv",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let d = &self.data;
        let s = &self.stages;
        let b = &self.bench;
        let mut lines: Vec<(String, String)> = vec![
            ("task".into(), task.into()),
            ("data.seq_len".into(), d.seq_len.to_string()),
            ("data.n_values".into(), d.n_values.to_string()),
            ("data.train_size".into(), d.train_size.to_string()),
            ("data.val_size".into(), d.val_size.to_string()),
            ("data.test_size".into(), d.test_size.to_string()),
            ("data.vocab_size".into(), d.vocab_size.to_string()),
            ("data.csv_path".into(), path(&d.csv_path)),
            ("data.csv_test_path".into(), path(&d.csv_test_path)),
        ];
        lines.extend(self.model.to_kv().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        lines.extend(self.train.to_kv().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        lines.extend([
            ("stages.dense_epochs".into(), s.dense_epochs.to_string()),
            ("stages.finetune_epochs".into(), s.finetune_epochs.to_string()),
            ("stages.scratch_epochs".into(), s.scratch_epochs.to_string()),
            ("stages.adapt_epochs".into(), s.adapt_epochs.to_string()),
            ("stages.adapt_learning_rate".into(), format!("{:?}", s.adapt_learning_rate)),
            ("stages.rescue_lambda".into(), s.rescue_lambda.to_string()),
            ("stages.rescue_beta".into(), s.rescue_beta.to_string()),
            ("stages.static_budgets".into(), join(&s.static_budgets)),
            ("stages.prune_budgets".into(), join(&s.prune_budgets)),
            ("stages.sweep".into(), s.sweep.to_string()),
            ("bench.warmup".into(), b.warmup.to_string()),
            ("bench.repeats".into(), b.repeats.to_string()),
            ("bench.examples".into(), b.examples.to_string()),
            ("bench.batch_size".into(), b.batch_size.to_string()),
            ("bench.budgets".into(), join(&b.budgets)),
            ("run.output_dir".into(), self.output_dir.display().to_string()),
            ("run.seeds".into(), join(&self.seeds)),
            ("run.data_seeds".into(), join(&self.data_seeds)),
        ]);
        for (k, v) in lines {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
