//! The ordered reproduction driver: dense grid, from-scratch and warm-started
//! budgeted training, static gates, post-hoc pruning, hard-gate adaptation,
//! budget sweeps, latency benchmark and report.
//!
//! All outputs live under one run directory. `manifest.json` records the
//! configuration and the completed stages; a rerun skips completed stages and
//! any job whose result file already exists.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{measure_latency, report_speedup, BenchSettings, LatencyReport, Variant};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::data::{load_text_csv, marked_dataset, CsvSplits, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{
    check_sweep, evaluate, gate_rank_stability, mean_std, pareto_report, prune_posthoc, score_heads, sweep_points,
    GateSpec, HeadImportance, RankStability, SweepPoint,
};
use crate::training::{adapt_hard, train_budgeted, train_dense, train_static, TrainConfig, TrainLog, TrainMode};

/// Caps the number of concurrent training jobs.
pub const WORKERS_ENV: &str = "BUDATTN_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dense,
    Scratch,
    Budgeted,
    Static,
    Prune,
    Adapt,
    Sweep,
    Bench,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Dense,
        Stage::Scratch,
        Stage::Budgeted,
        Stage::Static,
        Stage::Prune,
        Stage::Adapt,
        Stage::Sweep,
        Stage::Bench,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dense => "dense",
            Stage::Scratch => "scratch",
            Stage::Budgeted => "budgeted",
            Stage::Static => "static",
            Stage::Prune => "prune",
            Stage::Adapt => "adapt",
            Stage::Sweep => "sweep",
            Stage::Bench => "bench",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Full text of the producing configuration.
    pub config: String,
    pub completed: Vec<Stage>,
}

/// Wraps every JSON artifact with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: String,
    pub seeds: Vec<u64>,
    pub data_seeds: Vec<u64>,
    pub results: T,
}

/// One dense-grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub data_seed: u64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub seconds: f64,
    pub checkpoint: String,
}

/// Accuracy and cost of one checkpoint evaluated at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPoint {
    pub method: String,
    pub eval: String,
    pub seed: u64,
    pub budget: f64,
    pub cost: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Head importance as written to disk; `scores[layer][head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub seed: u64,
    pub scores: Vec<Vec<f64>>,
    pub baseline_loss: f64,
    pub passes: usize,
}

impl ImportanceRecord {
    pub fn new(seed: u64, imp: &HeadImportance) -> Self {
        let heads = imp.scores.shape()[1];
        Self {
            seed,
            scores: imp.scores.data().chunks(heads).map(<[f64]>::to_vec).collect(),
            baseline_loss: imp.baseline_loss,
            passes: imp.passes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub seed: u64,
    pub budget: f64,
    /// Hard-mask validation accuracy of the budgeted checkpoint.
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCheck {
    pub method: String,
    pub seed: u64,
    pub points: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub method: String,
    pub seed: u64,
    pub stability: RankStability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub checks: Vec<SweepCheck>,
    pub ranks: Vec<RankRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: String,
    #[serde(flatten)]
    pub report: LatencyReport,
}

/// Aggregate latency row; speedup averages per-seed dense/method ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub method: String,
    pub variant: Variant,
    pub budget: Option<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    pub speedup_mean: f64,
    pub speedup_std: f64,
    pub speedup_per_seed: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub eval: String,
    pub models: String,
    pub knob: String,
    pub budget: f64,
    pub seeds: Vec<u64>,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub val_accuracy_mean: f64,
    pub val_accuracy_std: f64,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
}

/// Everything the report stage aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dense: Vec<CellResult>,
    pub methods: Vec<MethodPoint>,
    pub table: Vec<TableRow>,
    pub adaptation: Vec<AdaptResult>,
    pub sweep: SweepResults,
    pub latency: Vec<LatencyRow>,
}

pub const SCRATCH: &str = "budgeted_scratch";
pub const WARM: &str = "budgeted_warm";
pub const STATIC: &str = "static_warm";
pub const PRUNED: &str = "posthoc_prune";
pub const ADAPTED: &str = "budgeted_adapted";

/// Budgets at which gated checkpoints enter the core table.
pub const TABLE_BUDGETS: [f64; 3] = [0.25, 0.5, 0.75];
/// Budget at which hard adaptation is judged.
pub const ADAPT_BUDGET: f64 = 0.5;
pub const RANK_BUDGETS: (f64, f64) = (0.25, 0.75);

/// Number of worker threads: `BUDATTN_WORKERS` if set, else available cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Data(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs `f(0..n)` on up to `workers` threads; results keep job order. The
/// first failing job (in job order) determines the error.
pub fn run_jobs<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("job slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("job slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the dataset for one data seed.
pub fn load_dataset(cfg: &RunConfig, data_seed: u64) -> Result<DatasetSplit> {
    let data = match cfg.task {
        Task::Marked => marked_dataset(data_seed, &cfg.data.marked())?,
        Task::Csv => {
            let path = cfg.data.csv_path.as_ref().ok_or_else(|| Error::Data("no csv path".into()))?;
            let splits = CsvSplits {
                val_size: cfg.data.val_size,
                test_path: cfg.data.csv_test_path.clone(),
                seed: data_seed,
            };
            load_text_csv(path, cfg.data.vocab_size, cfg.data.seq_len, &splits)?
        }
    };
    if data.vocab_size > cfg.model.vocab_size || data.num_classes != cfg.model.num_classes {
        return Err(Error::ModelConfig(format!(
            "dataset has vocabulary {} and {} classes; model has {} and {}",
            data.vocab_size, data.num_classes, cfg.model.vocab_size, cfg.model.num_classes
        )));
    }
    Ok(data)
}

/// Training settings of one suite stage. Gated runs started from a checkpoint
/// fine-tune for `stages.finetune_epochs` under the rescue cost weights; runs
/// from scratch use `stages.scratch_epochs` and the base weights. Hard
/// adaptation uses its own epochs and learning rate.
pub fn stage_train_config(cfg: &RunConfig, mode: TrainMode, warm: bool, seed: u64) -> TrainConfig {
    let st = &cfg.stages;
    let mut t = cfg.train.clone();
    t.mode = mode;
    t.seed = seed;
    t.epochs = match mode {
        TrainMode::Dense => st.dense_epochs,
        TrainMode::HardAdapt => st.adapt_epochs,
        _ if warm => st.finetune_epochs,
        _ => st.scratch_epochs,
    };
    if mode == TrainMode::HardAdapt {
        t.optimizer.learning_rate = st.adapt_learning_rate;
    } else if warm {
        t.lambda = st.rescue_lambda;
        t.beta = st.rescue_beta;
    }
    t
}

fn budget_tag(b: f64) -> String {
    format!("b{b:.2}")
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.as_str().to_string(),
        source: Box::new(e),
    }
}

/// A reproduction run bound to one directory.
pub struct Reproduction {
    cfg: RunConfig,
    config_text: String,
    dir: PathBuf,
    workers: usize,
    quiet: bool,
    datasets: Mutex<HashMap<u64, Arc<DatasetSplit>>>,
}

impl Reproduction {
    /// Opens `dir`, creating it and its manifest if needed. Fails if the
    /// directory holds results of a different configuration.
    pub fn open(cfg: RunConfig, dir: &Path, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let config_text = cfg.to_text();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = Self {
            cfg,
            config_text,
            dir: dir.to_path_buf(),
            workers,
            quiet: false,
            datasets: Mutex::new(HashMap::new()),
        };
        let manifest = run.manifest()?;
        if manifest.config != run.config_text {
            return Err(Error::Data(format!(
                "{} holds results of a different configuration; use a fresh directory",
                dir.display()
            )));
        }
        write_json(&run.manifest_path(), &manifest)?;
        let cfg_path = dir.join("config.cfg");
        std::fs::write(&cfg_path, &run.config_text).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(run)
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Manifest {
                config: self.config_text.clone(),
                completed: Vec::new(),
            })
        }
    }

    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.dir.display());
        }
    }

    fn artifact<T>(&self, results: T) -> Artifact<T> {
        Artifact {
            config: self.config_text.clone(),
            seeds: self.cfg.seeds.clone(),
            data_seeds: self.cfg.data_seeds.clone(),
            results,
        }
    }

    fn provenance(&self) -> BTreeMap<String, serde_json::Value> {
        let mut p = BTreeMap::new();
        p.insert("config".to_string(), serde_json::Value::String(self.config_text.clone()));
        p.insert("seeds".to_string(), serde_json::json!(self.cfg.seeds));
        p.insert("data_seeds".to_string(), serde_json::json!(self.cfg.data_seeds));
        p
    }

    pub fn dataset(&self, data_seed: u64) -> Result<Arc<DatasetSplit>> {
        if let Some(d) = self.datasets.lock().expect("dataset cache").get(&data_seed) {
            return Ok(Arc::clone(d));
        }
        let d = Arc::new(load_dataset(&self.cfg, data_seed)?);
        self.datasets
            .lock()
            .expect("dataset cache")
            .insert(data_seed, Arc::clone(&d));
        Ok(d)
    }

    /// Data seed shared by every stage after the dense grid.
    pub fn primary_data_seed(&self) -> u64 {
        self.cfg.data_seeds[0]
    }

    pub fn dense_path(&self, data_seed: u64, seed: u64) -> PathBuf {
        self.dir.join(format!("dense/data{data_seed}_seed{seed}.ckpt"))
    }

    pub fn scratch_path(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("scratch/seed{seed}.ckpt"))
    }

    pub fn budgeted_path(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("budgeted/seed{seed}.ckpt"))
    }

    pub fn static_path(&self, budget: f64, seed: u64) -> PathBuf {
        self.dir.join(format!("static/{}_seed{seed}.ckpt", budget_tag(budget)))
    }

    pub fn adapted_path(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("adapt/seed{seed}.ckpt"))
    }

    fn meta(&self, stage: Stage, data_seed: u64, seed: u64, source: Option<&Path>) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("stage".into(), stage.as_str().into());
        m.insert("data_seed".into(), data_seed.to_string());
        m.insert("seed".into(), seed.to_string());
        m.insert(
            "task".into(),
            match self.cfg.task {
                Task::Marked => "marked".into(),
                Task::Csv => "csv".into(),
            },
        );
        m.insert("data.train_size".into(), self.cfg.data.train_size.to_string());
        m.insert("data.val_size".into(), self.cfg.data.val_size.to_string());
        m.insert("data.n_values".into(), self.cfg.data.n_values.to_string());
        if let Some(src) = source {
            m.insert("warm_start".into(), src.display().to_string());
        }
        m
    }

    /// Trains one checkpoint (or reuses an existing one) with a JSON-lines log
    /// next to it.
    fn train_job(
        &self,
        path: &Path,
        meta: BTreeMap<String, String>,
        run: impl FnOnce(&mut TrainLog<'_>) -> Result<Checkpoint>,
    ) -> Result<(Checkpoint, f64)> {
        if path.exists() {
            return Ok((Checkpoint::load(path)?, f64::NAN));
        }
        let log_path = path.with_extension("jsonl");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut w = BufWriter::new(file);
        let start = Instant::now();
        let mut ck = {
            let mut log = TrainLog::new(Some(&mut w));
            run(&mut log)?
        };
        w.flush().map_err(|e| Error::io(&log_path, e))?;
        let seconds = start.elapsed().as_secs_f64();
        ck.meta.extend(meta);
        ck.meta.insert("train_seconds".into(), format!("{seconds:.1}"));
        ck.save(path)?;
        self.note(&format!(
            "{} done in {seconds:.0}s (best val {:.4} at epoch {})",
            path.display(),
            ck.best_val_accuracy,
            ck.epoch
        ));
        Ok((ck, seconds))
    }

    /// Runs every stage not yet recorded in the manifest.
    pub fn run_all(&self) -> Result<RunSummary> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        self.summary()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let mut manifest = self.manifest()?;
        if manifest.completed.contains(&stage) {
            self.note(&format!("stage {} already complete", stage.as_str()));
            return Ok(());
        }
        self.note(&format!("stage {} starting", stage.as_str()));
        let start = Instant::now();
        match stage {
            Stage::Dense => self.stage_dense(),
            Stage::Scratch => self.stage_scratch(),
            Stage::Budgeted => self.stage_budgeted(),
            Stage::Static => self.stage_static(),
            Stage::Prune => self.stage_prune(),
            Stage::Adapt => self.stage_adapt(),
            Stage::Sweep => self.stage_sweep(),
            Stage::Bench => self.stage_bench(),
            Stage::Report => self.write_report().map(|_| ()),
        }
        .map_err(stage_err(stage))?;
        manifest.completed.push(stage);
        write_json(&self.manifest_path(), &manifest)?;
        self.note(&format!(
            "stage {} complete in {:.0}s",
            stage.as_str(),
            start.elapsed().as_secs_f64()
        ));
        Ok(())
    }

    fn results_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.as_str()).join("results.json")
    }

    fn save_results<T: Serialize>(&self, stage: Stage, results: T) -> Result<()> {
        write_json(&self.results_path(stage), &self.artifact(results))
    }

    pub fn load_results<T: DeserializeOwned>(&self, stage: Stage) -> Result<T> {
        Ok(read_json::<Artifact<T>>(&self.results_path(stage))?.results)
    }

    fn stage_dense(&self) -> Result<()> {
        let cells: Vec<(u64, u64)> = self
            .cfg
            .data_seeds
            .iter()
            .flat_map(|&d| self.cfg.seeds.iter().map(move |&s| (d, s)))
            .collect();
        let results = run_jobs(cells.len(), self.workers, |i| {
            let (ds, seed) = cells[i];
            let data = self.dataset(ds)?;
            let path = self.dense_path(ds, seed);
            let tc = stage_train_config(&self.cfg, TrainMode::Dense, false, seed);
            let (ck, seconds) = self.train_job(&path, self.meta(Stage::Dense, ds, seed, None), |log| {
                train_dense(&self.cfg.model, &tc, &data, log)
            })?;
            Ok(CellResult {
                data_seed: ds,
                seed,
                val_accuracy: ck.best_val_accuracy,
                test_accuracy: evaluate(&ck.model, &data.test, GateSpec::Dense)?.accuracy,
                best_epoch: ck.epoch,
                seconds,
                checkpoint: path.display().to_string(),
            })
        })?;
        self.save_results(Stage::Dense, results)
    }

    /// Soft-gate points of a gated checkpoint at the table budgets.
    fn soft_points(&self, method: &str, ck: &Checkpoint, seed: u64, budgets: &[f64]) -> Result<Vec<MethodPoint>> {
        let data = self.dataset(self.primary_data_seed())?;
        budgets
            .iter()
            .map(|&b| {
                let val = evaluate(&ck.model, &data.val, GateSpec::Soft(b))?;
                let test = evaluate(&ck.model, &data.test, GateSpec::Soft(b))?;
                Ok(MethodPoint {
                    method: method.to_string(),
                    eval: "soft".into(),
                    seed,
                    budget: b,
                    cost: val.cost,
                    val_accuracy: val.accuracy,
                    test_accuracy: test.accuracy,
                })
            })
            .collect()
    }

    fn hard_points(&self, method: &str, ck: &Checkpoint, seed: u64, budgets: &[f64]) -> Result<Vec<MethodPoint>> {
        let data = self.dataset(self.primary_data_seed())?;
        budgets
            .iter()
            .map(|&b| {
                let spec = GateSpec::Hard { budget: b, floor: false };
                let val = evaluate(&ck.model, &data.val, spec)?;
                let test = evaluate(&ck.model, &data.test, spec)?;
                Ok(MethodPoint {
                    method: method.to_string(),
                    eval: "hard".into(),
                    seed,
                    budget: b,
                    cost: val.cost,
                    val_accuracy: val.accuracy,
                    test_accuracy: test.accuracy,
                })
            })
            .collect()
    }

    fn stage_scratch(&self) -> Result<()> {
        let ds = self.primary_data_seed();
        let seeds = &self.cfg.seeds;
        let points = run_jobs(seeds.len(), self.workers, |i| {
            let seed = seeds[i];
            let data = self.dataset(ds)?;
            let tc = stage_train_config(&self.cfg, TrainMode::Budgeted, false, seed);
            let (ck, _) = self.train_job(&self.scratch_path(seed), self.meta(Stage::Scratch, ds, seed, None), |log| {
                train_budgeted(&self.cfg.model, &tc, &data, None, log)
            })?;
            self.soft_points(SCRATCH, &ck, seed, &TABLE_BUDGETS)
        })?;
        self.save_results(Stage::Scratch, points.concat())
    }

    fn stage_budgeted(&self) -> Result<()> {
        let ds = self.primary_data_seed();
        let seeds = &self.cfg.seeds;
        let points = run_jobs(seeds.len(), self.workers, |i| {
            let seed = seeds[i];
            let data = self.dataset(ds)?;
            let src = self.dense_path(ds, seed);
            let warm = Checkpoint::load(&src)?;
            let tc = stage_train_config(&self.cfg, TrainMode::Budgeted, true, seed);
            let (ck, _) = self.train_job(
                &self.budgeted_path(seed),
                self.meta(Stage::Budgeted, ds, seed, Some(&src)),
                |log| train_budgeted(&self.cfg.model, &tc, &data, Some(&warm), log),
            )?;
            let mut pts = self.soft_points(WARM, &ck, seed, &TABLE_BUDGETS)?;
            pts.extend(self.hard_points(WARM, &ck, seed, &TABLE_BUDGETS)?);
            Ok(pts)
        })?;
        self.save_results(Stage::Budgeted, points.concat())
    }

    fn stage_static(&self) -> Result<()> {
        let ds = self.primary_data_seed();
        let jobs: Vec<(f64, u64)> = self
            .cfg
            .stages
            .static_budgets
            .iter()
            .flat_map(|&b| self.cfg.seeds.iter().map(move |&s| (b, s)))
            .collect();
        let points = run_jobs(jobs.len(), self.workers, |i| {
            let (b, seed) = jobs[i];
            let data = self.dataset(ds)?;
            let src = self.dense_path(ds, seed);
            let warm = Checkpoint::load(&src)?;
            let tc = stage_train_config(&self.cfg, TrainMode::Static(b), true, seed);
            let (ck, _) = self.train_job(
                &self.static_path(b, seed),
                self.meta(Stage::Static, ds, seed, Some(&src)),
                |log| train_static(&self.cfg.model, &tc, &data, Some(&warm), log),
            )?;
            let mut pts = self.soft_points(STATIC, &ck, seed, &[b])?;
            pts.extend(self.hard_points(STATIC, &ck, seed, &[b])?);
            Ok(pts)
        })?;
        self.save_results(Stage::Static, points.concat())
    }

    fn stage_prune(&self) -> Result<()> {
        let ds = self.primary_data_seed();
        let seeds = &self.cfg.seeds;
        let points = run_jobs(seeds.len(), self.workers, |i| {
            let seed = seeds[i];
            let data = self.dataset(ds)?;
            let ck = Checkpoint::load(&self.dense_path(ds, seed))?;
            let importance: HeadImportance = score_heads(&ck.model, &data.val)?;
            write_json(
                &self.dir.join(format!("prune/importance_seed{seed}.json")),
                &self.artifact(ImportanceRecord::new(seed, &importance)),
            )?;
            let mut pts = Vec::new();
            for &b in &self.cfg.stages.prune_budgets {
                let mask = prune_posthoc(&importance, b, true)?;
                mask.write_csv(&self.dir.join(format!("prune/mask_{}_seed{seed}.csv", budget_tag(b))))?;
                let val = evaluate(&ck.model, &data.val, GateSpec::Mask(&mask))?;
                let test = evaluate(&ck.model, &data.test, GateSpec::Mask(&mask))?;
                pts.push(MethodPoint {
                    method: PRUNED.into(),
                    eval: "hard".into(),
                    seed,
                    budget: b,
                    cost: val.cost,
                    val_accuracy: val.accuracy,
                    test_accuracy: test.accuracy,
                });
            }
            Ok(pts)
        })?;
        self.save_results(Stage::Prune, points.concat())
    }

    fn stage_adapt(&self) -> Result<()> {
        let ds = self.primary_data_seed();
        let seeds = &self.cfg.seeds;
        let results = run_jobs(seeds.len(), self.workers, |i| {
            let seed = seeds[i];
            let data = self.dataset(ds)?;
            let src = self.budgeted_path(seed);
            let teacher = Checkpoint::load(&src)?;
            let spec = GateSpec::Hard {
                budget: ADAPT_BUDGET,
                floor: false,
            };
            let before = evaluate(&teacher.model, &data.val, spec)?.accuracy;
            let tc = stage_train_config(&self.cfg, TrainMode::HardAdapt, true, seed);
            let (ck, _) = self.train_job(
                &self.adapted_path(seed),
                self.meta(Stage::Adapt, ds, seed, Some(&src)),
                |log| adapt_hard(&tc, &teacher, &data, log),
            )?;
            let after = evaluate(&ck.model, &data.val, spec)?.accuracy;
            let mut pts = self.hard_points(ADAPTED, &ck, seed, &TABLE_BUDGETS)?;
            pts.extend(self.soft_points(ADAPTED, &ck, seed, &[ADAPT_BUDGET])?);
            Ok((
                AdaptResult {
                    seed,
                    budget: ADAPT_BUDGET,
                    before,
                    after,
                },
                pts,
            ))
        })?;
        let (adapt, points): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        self.save_results(Stage::Adapt, (adapt, points.concat()))
    }

    /// Budgeted checkpoints that get a full sweep: `(method, seed, path)`.
    fn sweep_targets(&self) -> Vec<(&'static str, u64, PathBuf)> {
        let mut out = Vec::new();
        for &s in &self.cfg.seeds {
            out.push((SCRATCH, s, self.scratch_path(s)));
            out.push((WARM, s, self.budgeted_path(s)));
            out.push((ADAPTED, s, self.adapted_path(s)));
        }
        out
    }

    fn stage_sweep(&self) -> Result<()> {
        let data = self.dataset(self.primary_data_seed())?;
        let budgets = self.cfg.stages.sweep.budgets();
        let targets = self.sweep_targets();
        let done = run_jobs(targets.len(), self.workers, |i| {
            let (method, seed, path) = &targets[i];
            let ck = Checkpoint::load(path)?;
            let points = sweep_points(&ck.model, &data.val, &budgets, *seed)?;
            let cfg = &ck.model.config;
            let (passed, detail) = match check_sweep(&points, cfg.layers, cfg.heads) {
                Ok(()) => (true, String::new()),
                Err(e) => (false, e.to_string()),
            };
            let check = SweepCheck {
                method: method.to_string(),
                seed: *seed,
                points: points.len(),
                passed,
                detail,
            };
            let (lo, hi) = RANK_BUDGETS;
            let rank = RankRecord {
                method: method.to_string(),
                seed: *seed,
                stability: gate_rank_stability(&ck.model, lo, hi)?,
            };
            Ok((points, check, rank))
        })?;
        let mut by_method: BTreeMap<&str, Vec<SweepPoint>> = BTreeMap::new();
        let mut checks = Vec::new();
        let mut ranks = Vec::new();
        for ((method, _, _), (points, check, rank)) in targets.iter().zip(done) {
            by_method.entry(method).or_default().extend(points);
            checks.push(check);
            ranks.push(rank);
        }
        for (method, points) in &by_method {
            pareto_report(points, &self.dir.join(format!("sweep/{method}")), self.provenance())?;
        }
        self.save_results(Stage::Sweep, SweepResults { checks, ranks })
    }

    /// Latency of every variant, one measurement at a time on a pinned thread.
    fn stage_bench(&self) -> Result<()> {
        let data = self.dataset(self.primary_data_seed())?;
        let bp = &self.cfg.bench;
        let n = bp.examples.min(data.test.len());
        let examples = &data.test[..n];
        let settings = BenchSettings {
            warmup: bp.warmup,
            repeats: bp.repeats,
            batch_size: bp.batch_size,
        };
        let ds = self.primary_data_seed();
        let out_path = self.dir.join("bench/latency.jsonl");
        std::fs::create_dir_all(self.dir.join("bench")).map_err(|e| Error::io(self.dir.join("bench"), e))?;
        let mut records = Vec::new();
        // The benchmark thread is pinned; keep it separate from the caller.
        std::thread::scope(|scope| {
            scope
                .spawn(|| -> Result<()> {
                    for &seed in &self.cfg.seeds {
                        let dense = Checkpoint::load(&self.dense_path(ds, seed))?;
                        let adapted = Checkpoint::load(&self.adapted_path(seed))?;
                        let mut jobs: Vec<(String, &Checkpoint, Variant, Option<f64>)> = vec![
                            ("dense".into(), &dense, Variant::Dense, None),
                            (ADAPTED.into(), &adapted, Variant::Soft, Some(ADAPT_BUDGET)),
                        ];
                        for &b in &bp.budgets {
                            jobs.push((ADAPTED.into(), &adapted, Variant::HardSkip, Some(b)));
                        }
                        let statics: Vec<(f64, Checkpoint)> = bp
                            .budgets
                            .iter()
                            .filter(|b| self.cfg.stages.static_budgets.contains(b))
                            .map(|&b| Ok((b, Checkpoint::load(&self.static_path(b, seed))?)))
                            .collect::<Result<_>>()?;
                        for (b, ck) in &statics {
                            jobs.push((STATIC.into(), ck, Variant::HardSkip, Some(*b)));
                        }
                        for (method, ck, variant, budget) in jobs {
                            let report = measure_latency(&ck.model, examples, variant, budget, seed, settings)?;
                            self.note(&format!(
                                "bench seed {seed} {method} {} {:?}: median {:.1} ms",
                                variant.as_str(),
                                budget,
                                report.median_ms
                            ));
                            records.push(BenchRecord { method, report });
                        }
                    }
                    Ok(())
                })
                .join()
                .expect("benchmark thread")
        })?;
        let mut w = BufWriter::new(File::create(&out_path).map_err(|e| Error::io(&out_path, e))?);
        for r in &records {
            let mut v = serde_json::to_value(r)?;
            v["config"] = serde_json::Value::String(self.config_text.clone());
            writeln!(w, "{}", serde_json::to_string(&v)?).map_err(|e| Error::io(&out_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&out_path, e))?;
        let rows = latency_rows(&records)?;
        self.save_results(Stage::Bench, (records, rows))
    }

    /// Reads whatever stage results exist and aggregates them.
    pub fn summary(&self) -> Result<RunSummary> {
        let opt = |stage: Stage| self.results_path(stage).exists();
        let dense: Vec<CellResult> = if opt(Stage::Dense) { self.load_results(Stage::Dense)? } else { Vec::new() };
        let mut methods: Vec<MethodPoint> = dense
            .iter()
            .filter(|c| c.data_seed == self.primary_data_seed())
            .map(|c| MethodPoint {
                method: "dense".into(),
                eval: "dense".into(),
                seed: c.seed,
                budget: 1.0,
                cost: 1.0,
                val_accuracy: c.val_accuracy,
                test_accuracy: c.test_accuracy,
            })
            .collect();
        for stage in [Stage::Scratch, Stage::Budgeted, Stage::Static, Stage::Prune] {
            if opt(stage) {
                methods.extend(self.load_results::<Vec<MethodPoint>>(stage)?);
            }
        }
        let mut adaptation = Vec::new();
        if opt(Stage::Adapt) {
            let (a, p): (Vec<AdaptResult>, Vec<MethodPoint>) = self.load_results(Stage::Adapt)?;
            adaptation = a;
            methods.extend(p);
        }
        let sweep = if opt(Stage::Sweep) {
            self.load_results(Stage::Sweep)?
        } else {
            SweepResults {
                checks: Vec::new(),
                ranks: Vec::new(),
            }
        };
        let latency = if opt(Stage::Bench) {
            self.load_results::<(Vec<BenchRecord>, Vec<LatencyRow>)>(Stage::Bench)?.1
        } else {
            Vec::new()
        };
        let mut table = core_table(&methods);
        // The dense row covers the whole data x optimization grid.
        if let Some(row) = table.iter_mut().find(|r| r.method == "dense") {
            let val: Vec<f64> = dense.iter().map(|c| c.val_accuracy).collect();
            let test: Vec<f64> = dense.iter().map(|c| c.test_accuracy).collect();
            (row.val_accuracy_mean, row.val_accuracy_std) = mean_std(&val);
            (row.test_accuracy_mean, row.test_accuracy_std) = mean_std(&test);
            row.seeds = dense.iter().map(|c| c.seed).collect();
        }
        Ok(RunSummary {
            dense,
            methods,
            table,
            adaptation,
            sweep,
            latency,
        })
    }

    /// Writes `report/summary.json`, `report/report.md` and `report/table_core.csv`.
    pub fn write_report(&self) -> Result<RunSummary> {
        let summary = self.summary()?;
        let dir = self.dir.join("report");
        write_json(&dir.join("summary.json"), &self.artifact(&summary))?;
        let md = render_markdown(&summary, &self.cfg);
        let path = dir.join("report.md");
        std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("table_core.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &summary.table {
            w.serialize(TableCsv::from(r))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    }
}

#[derive(Serialize)]
struct TableCsv<'a> {
    method: &'a str,
    eval: &'a str,
    models: &'a str,
    knob: &'a str,
    budget: f64,
    n: usize,
    cost_mean: f64,
    cost_std: f64,
    val_accuracy_mean: f64,
    val_accuracy_std: f64,
    test_accuracy_mean: f64,
    test_accuracy_std: f64,
}

impl<'a> From<&'a TableRow> for TableCsv<'a> {
    fn from(r: &'a TableRow) -> Self {
        Self {
            method: &r.method,
            eval: &r.eval,
            models: &r.models,
            knob: &r.knob,
            budget: r.budget,
            n: r.seeds.len(),
            cost_mean: r.cost_mean,
            cost_std: r.cost_std,
            val_accuracy_mean: r.val_accuracy_mean,
            val_accuracy_std: r.val_accuracy_std,
            test_accuracy_mean: r.test_accuracy_mean,
            test_accuracy_std: r.test_accuracy_std,
        }
    }
}

/// Groups method points by `(method, eval, budget)` in first-appearance order.
pub fn core_table(points: &[MethodPoint]) -> Vec<TableRow> {
    let mut groups: Vec<((String, String, u64), Vec<&MethodPoint>)> = Vec::new();
    for p in points {
        let key = (p.method.clone(), p.eval.clone(), p.budget.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(p),
            None => groups.push((key, vec![p])),
        }
    }
    let static_models = points
        .iter()
        .filter(|p| p.method == STATIC)
        .map(|p| p.budget.to_bits())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    groups
        .into_iter()
        .map(|((method, eval, bits), pts)| {
            let stat = |f: fn(&MethodPoint) -> f64| mean_std(&pts.iter().map(|p| f(p)).collect::<Vec<_>>());
            let (cost_mean, cost_std) = stat(|p| p.cost);
            let (val_accuracy_mean, val_accuracy_std) = stat(|p| p.val_accuracy);
            let (test_accuracy_mean, test_accuracy_std) = stat(|p| p.test_accuracy);
            let (models, knob) = match method.as_str() {
                "dense" => ("1".to_string(), "no"),
                STATIC => (static_models.to_string(), "no"),
                PRUNED => ("1 + masks".to_string(), "discrete"),
                _ => ("1".to_string(), "yes"),
            };
            TableRow {
                method,
                eval,
                models,
                knob: knob.to_string(),
                budget: f64::from_bits(bits),
                seeds: pts.iter().map(|p| p.seed).collect(),
                cost_mean,
                cost_std,
                val_accuracy_mean,
                val_accuracy_std,
                test_accuracy_mean,
                test_accuracy_std,
            }
        })
        .collect()
}

/// Aggregates latency records per `(method, variant, budget)` against the
/// dense records of the same seeds.
pub fn latency_rows(records: &[BenchRecord]) -> Result<Vec<LatencyRow>> {
    let dense: Vec<LatencyReport> = records
        .iter()
        .filter(|r| r.report.variant == Variant::Dense)
        .map(|r| r.report.clone())
        .collect();
    let mut keys: Vec<(String, Variant, Option<u64>)> = Vec::new();
    for r in records {
        let k = (r.method.clone(), r.report.variant, r.report.budget.map(f64::to_bits));
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, variant, bits)| {
            let group: Vec<LatencyReport> = records
                .iter()
                .filter(|r| r.method == method && r.report.variant == variant && r.report.budget.map(f64::to_bits) == bits)
                .map(|r| r.report.clone())
                .collect();
            let s = report_speedup(&dense, &group)?;
            let (accuracy_mean, accuracy_std) = mean_std(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (latency_mean_ms, latency_std_ms) = mean_std(&group.iter().map(|r| r.median_ms).collect::<Vec<_>>());
            Ok(LatencyRow {
                method,
                variant,
                budget: bits.map(f64::from_bits),
                accuracy_mean,
                accuracy_std,
                latency_mean_ms,
                latency_std_ms,
                speedup_mean: s.mean,
                speedup_std: s.std,
                speedup_per_seed: s.ratios,
            })
        })
        .collect()
}

fn pct(m: f64, s: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
}

pub fn render_markdown(s: &RunSummary, cfg: &RunConfig) -> String {
    let mut out = String::new();
    out.push_str("# Reproduction report\n\n");
    out.push_str(&format!(
        "Model: {} layers x {} heads, hidden {}, ffn {}, sequence length {}. Seeds {:?}, data seeds {:?}.\n\n",
        cfg.model.layers, cfg.model.heads, cfg.model.hidden, cfg.model.ffn_dim, cfg.model.seq_len, cfg.seeds, cfg.data_seeds
    ));
    if !s.dense.is_empty() {
        out.push_str("## Dense grid (validation accuracy)\n\n| data seed | seed | val acc | test acc | best epoch |\n|---|---|---|---|---|\n");
        for c in &s.dense {
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {} |\n",
                c.data_seed, c.seed, c.val_accuracy, c.test_accuracy, c.best_epoch
            ));
        }
        out.push('\n');
    }
    if !s.table.is_empty() {
        out.push_str("## Core results\n\n| method | eval | models | knob | budget | cost | val acc (%) | test acc (%) | n |\n|---|---|---|---|---|---|---|---|---|\n");
        for r in &s.table {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {:.3} ± {:.3} | {} | {} | {} |\n",
                r.method,
                r.eval,
                r.models,
                r.knob,
                r.budget,
                r.cost_mean,
                r.cost_std,
                pct(r.val_accuracy_mean, r.val_accuracy_std),
                pct(r.test_accuracy_mean, r.test_accuracy_std),
                r.seeds.len()
            ));
        }
        out.push('\n');
    }
    if !s.adaptation.is_empty() {
        out.push_str("## Hard-gate adaptation (hard-mask validation accuracy)\n\n| seed | budget | before | after |\n|---|---|---|---|\n");
        for a in &s.adaptation {
            out.push_str(&format!("| {} | {:.2} | {:.4} | {:.4} |\n", a.seed, a.budget, a.before, a.after));
        }
        out.push('\n');
    }
    if !s.sweep.checks.is_empty() {
        out.push_str("## Budget sweeps\n\n| method | seed | points | checks | Spearman(0.25, 0.75) | retention |\n|---|---|---|---|---|---|\n");
        for (c, r) in s.sweep.checks.iter().zip(&s.sweep.ranks) {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.3} |\n",
                c.method,
                c.seed,
                c.points,
                if c.passed { "pass".to_string() } else { format!("FAIL: {}", c.detail) },
                r.stability.spearman.map_or("undefined".to_string(), |v| format!("{v:.3}")),
                r.stability.retention
            ));
        }
        out.push('\n');
    }
    if !s.latency.is_empty() {
        out.push_str("## Single-thread latency\n\n| method | eval | budget | acc (%) | latency ms | speedup |\n|---|---|---|---|---|---|\n");
        for r in &s.latency {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.1} ± {:.1} | {:.2} ± {:.2} |\n",
                r.method,
                r.variant.as_str(),
                r.budget.map_or("1.00".to_string(), |b| format!("{b:.2}")),
                pct(r.accuracy_mean, r.accuracy_std),
                r.latency_mean_ms,
                r.latency_std_ms,
                r.speedup_mean,
                r.speedup_std
            ));
        }
        out.push('\n');
    }
    out
}
