use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use budgeted_attention::bench::{measure_latency, BenchSettings, Variant};
use budgeted_attention::checkpoint::Checkpoint;
use budgeted_attention::config::{BudgetGrid, RunConfig};
use budgeted_attention::data::DatasetSplit;
use budgeted_attention::evaluation::{check_sweep, pareto_report, prune_posthoc, score_heads, sweep_points};
use budgeted_attention::pipeline::{
    latency_rows, load_dataset, stage_train_config, worker_count, write_json, Artifact, BenchRecord, ImportanceRecord, Reproduction, Stage,
};
use budgeted_attention::training::{adapt_hard, train_budgeted, train_dense, train_static, TrainLog, TrainMode};
use budgeted_attention::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "budattn", version, about = "Budget-conditioned attention-head gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Budgeted,
    Static,
    HardAdapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint.
    Train {
        mode: ModeArg,
        #[arg(long)]
        config: PathBuf,
        /// Dense checkpoint to start from; for hard-adapt, the budgeted teacher.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Optimization seed (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Data seed (defaults to the first configured data seed).
        #[arg(long)]
        data_seed: Option<u64>,
        /// Fixed budget for static gates.
        #[arg(long)]
        budget: Option<f64>,
        /// Checkpoint path; the log goes next to it with a `.jsonl` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Soft and hard budget sweep of a gated checkpoint.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.10:1.00:0.05")]
        budgets: BudgetGrid,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Output prefix; `.csv` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-hoc head pruning of a dense checkpoint.
    Prune {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        budget: f64,
        /// Keep at least one head per layer.
        #[arg(long)]
        floor: bool,
        #[arg(long)]
        data_seed: Option<u64>,
        /// Mask CSV path; importance scores go next to it as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-thread latency of dense, soft-gated and hard-skip inference.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        gated: PathBuf,
        /// Budgets for the hard-skip variant; the soft variant uses the first.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.75")]
        budgets: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the results of a reproduction directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Run the ordered suite, resuming from the stage manifest.
    Reproduce {
        #[arg(long, default_value = "configs/robust.cfg")]
        config: PathBuf,
        /// Run directory (defaults to the configured output directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only these stages, in suite order.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn data_for(cfg: &RunConfig, data_seed: Option<u64>) -> Result<(u64, DatasetSplit)> {
    let ds = data_seed.unwrap_or(cfg.data_seeds[0]);
    Ok((ds, load_dataset(cfg, ds)?))
}

fn artifact<T>(cfg: &RunConfig, seed: u64, data_seed: u64, results: T) -> Artifact<T> {
    Artifact {
        config: cfg.to_text(),
        seeds: vec![seed],
        data_seeds: vec![data_seed],
        results,
    }
}

/// Rejects checkpoints whose architecture differs from the config.
fn load_compatible(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.model.config != cfg.model {
        return Err(Error::Checkpoint(format!(
            "{} was trained with {:?}, but the config describes {:?}",
            path.display(),
            ck.model.config,
            cfg.model
        )));
    }
    Ok(ck)
}

fn ckpt_seed(ck: &Checkpoint) -> u64 {
    ck.meta
        .get("seed")
        .and_then(|s| s.parse().ok())
        .or(ck.train.as_ref().map(|t| t.seed))
        .unwrap_or(0)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            mode,
            config,
            warm_start,
            seed,
            data_seed,
            budget,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (ds, data) = data_for(&cfg, data_seed)?;
            let train_mode = match mode {
                ModeArg::Dense => TrainMode::Dense,
                ModeArg::Budgeted => TrainMode::Budgeted,
                ModeArg::Static => TrainMode::Static(
                    budget.ok_or_else(|| Error::TrainConfig("static training needs --budget".into()))?,
                ),
                ModeArg::HardAdapt => TrainMode::HardAdapt,
            };
            let tc = stage_train_config(&cfg, train_mode, warm_start.is_some(), seed);
            let warm = warm_start.as_deref().map(|p| load_compatible(p, &cfg)).transpose()?;
            let out = out.unwrap_or_else(|| {
                let name = tc.mode.to_string().replace(':', "_");
                cfg.output_dir.join(format!("train/{name}_data{ds}_seed{seed}.ckpt"))
            });
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let log_path = out.with_extension("jsonl");
            let mut w = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let mut ck = {
                let mut log = TrainLog::new(Some(&mut w));
                match mode {
                    ModeArg::Dense => train_dense(&cfg.model, &tc, &data, &mut log)?,
                    ModeArg::Budgeted => train_budgeted(&cfg.model, &tc, &data, warm.as_ref(), &mut log)?,
                    ModeArg::Static => train_static(&cfg.model, &tc, &data, warm.as_ref(), &mut log)?,
                    ModeArg::HardAdapt => {
                        let teacher = warm.as_ref().ok_or_else(|| {
                            Error::TrainConfig("hard-adapt needs --warm-start <budgeted checkpoint>".into())
                        })?;
                        adapt_hard(&tc, teacher, &data, &mut log)?
                    }
                }
            };
            w.flush().map_err(|e| Error::io(&log_path, e))?;
            ck.meta.insert("seed".into(), seed.to_string());
            ck.meta.insert("data_seed".into(), ds.to_string());
            if let Some(p) = &warm_start {
                ck.meta.insert("warm_start".into(), p.display().to_string());
            }
            ck.save(&out)?;
            println!(
                "{}: best validation accuracy {:.4} at epoch {}",
                out.display(),
                ck.best_val_accuracy,
                ck.epoch
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            ckpt,
            config,
            budgets,
            split,
            data_seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ck = load_compatible(&ckpt, &cfg)?;
            let seed = ckpt_seed(&ck);
            let (ds, data) = data_for(&cfg, data_seed)?;
            let examples = match split {
                SplitArg::Val => &data.val,
                SplitArg::Test => &data.test,
            };
            let points = sweep_points(&ck.model, examples, &budgets.budgets(), seed)?;
            let out = out.unwrap_or_else(|| ckpt.with_extension("sweep"));
            let mut prov = BTreeMap::new();
            prov.insert("config".to_string(), serde_json::Value::String(cfg.to_text()));
            prov.insert("seed".to_string(), serde_json::json!(seed));
            prov.insert("data_seed".to_string(), serde_json::json!(ds));
            prov.insert("checkpoint".to_string(), serde_json::json!(ckpt.display().to_string()));
            let (csv, json) = pareto_report(&points, &out, prov)?;
            println!("wrote {} and {}", csv.display(), json.display());
            let m = &ck.model.config;
            match check_sweep(&points, m.layers, m.heads) {
                Ok(()) => Ok(ExitCode::SUCCESS),
                Err(e) => {
                    eprintln!("sweep check failed: {e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::Prune {
            dense,
            config,
            budget,
            floor,
            data_seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ck = load_compatible(&dense, &cfg)?;
            let seed = ckpt_seed(&ck);
            let (ds, data) = data_for(&cfg, data_seed)?;
            let importance = score_heads(&ck.model, &data.val)?;
            let mask = prune_posthoc(&importance, budget, floor)?;
            let out = out.unwrap_or_else(|| dense.with_extension(format!("mask_b{budget:.2}.csv")));
            mask.write_csv(&out)?;
            write_json(
                &out.with_extension("importance.json"),
                &artifact(&cfg, seed, ds, ImportanceRecord::new(seed, &importance)),
            )?;
            println!("{}: {} of {} heads active", out.display(), mask.active_count(), cfg.model.total_heads());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            config,
            dense,
            gated,
            budgets,
            seed,
            data_seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dense_ck = load_compatible(&dense, &cfg)?;
            let gated_ck = load_compatible(&gated, &cfg)?;
            let seed = seed.unwrap_or_else(|| ckpt_seed(&gated_ck));
            let (ds, data) = data_for(&cfg, data_seed)?;
            let n = cfg.bench.examples.min(data.test.len());
            let settings = BenchSettings {
                warmup: cfg.bench.warmup,
                repeats: cfg.bench.repeats,
                batch_size: cfg.bench.batch_size,
            };
            let first = *budgets.first().ok_or_else(|| Error::InvalidBudget(f64::NAN))?;
            let mut jobs = vec![
                ("dense", &dense_ck, Variant::Dense, None),
                ("gated", &gated_ck, Variant::Soft, Some(first)),
            ];
            jobs.extend(budgets.iter().map(|&b| ("gated", &gated_ck, Variant::HardSkip, Some(b))));
            let records = std::thread::scope(|s| {
                s.spawn(|| {
                    jobs.into_iter()
                        .map(|(method, ck, variant, budget)| {
                            let report = measure_latency(&ck.model, &data.test[..n], variant, budget, seed, settings)?;
                            Ok(BenchRecord {
                                method: method.to_string(),
                                report,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .join()
                .expect("benchmark thread")
            })?;
            let rows = latency_rows(&records)?;
            for r in &rows {
                println!(
                    "{:>6} {:>9} budget {:>4}: median {:8.1} ms, speedup {:.2}x, accuracy {:.4}",
                    r.method,
                    r.variant.as_str(),
                    r.budget.map_or("-".to_string(), |b| format!("{b:.2}")),
                    r.latency_mean_ms,
                    r.speedup_mean,
                    r.accuracy_mean
                );
            }
            let out = out.unwrap_or_else(|| gated.with_extension("bench.json"));
            write_json(&out, &artifact(&cfg, seed, ds, (records, rows)))?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs } => {
            let cfg = RunConfig::load(&runs.join("config.cfg"))?;
            let run = Reproduction::open(cfg, &runs, 1)?;
            let summary = run.write_report()?;
            print!("{}", budgeted_attention::pipeline::render_markdown(&summary, run.config()));
            Ok(ExitCode::SUCCESS)
        }
        Command::Reproduce { config, out, stages } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let run = Reproduction::open(cfg, &dir, worker_count()?)?;
            let selected: Vec<Stage> = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                let mut v = Vec::new();
                for name in &stages {
                    let st = Stage::ALL
                        .into_iter()
                        .find(|s| s.as_str() == name)
                        .ok_or_else(|| Error::Data(format!("unknown stage `{name}`")))?;
                    v.push(st);
                }
                v.sort();
                v
            };
            for stage in selected {
                run.run_stage(stage)?;
            }
            println!("results in {}", run.dir().display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
