//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Criteria 7 and 8 are checked in-process against independent oracles. The
//! rest read the results of a full reproduction run. The run directory
//! defaults to `target/acceptance/robust` and is resumed, so a finished run
//! is only re-read; `BUDATTN_ACCEPTANCE_DIR` and `BUDATTN_ACCEPTANCE_CONFIG`
//! override the directory and configuration.

#[path = "support/oracles.rs"]
mod oracles;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use budgeted_attention::bench::Variant;
use budgeted_attention::config::RunConfig;
use budgeted_attention::data::gen_marked;
use budgeted_attention::evaluation::{score_heads, spearman};
use budgeted_attention::gating::{HeadMask, MaskKind, select_top_k};
use budgeted_attention::model::{EncoderModel, ModelConfig, TokenBatch};
use budgeted_attention::pipeline::{worker_count, Reproduction, RunSummary, ADAPTED, ADAPT_BUDGET, SCRATCH, WARM};
use budgeted_attention::tensor::{grad_check, Array, DEFAULT_FD_STEP};
use budgeted_attention::training::{budgeted_loss, distill_kl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dense_reliability(s: &RunSummary) -> Check {
    ensure(s.dense.len() == 9, format!("expected a 3x3 grid, found {} cells", s.dense.len()))?;
    let low = s.dense.iter().map(|c| c.val_accuracy).fold(f64::INFINITY, f64::min);
    let cells: Vec<String> = s
        .dense
        .iter()
        .map(|c| format!("{}/{}={:.4}", c.data_seed, c.seed, c.val_accuracy))
        .collect();
    ensure(low >= 0.95, format!("lowest cell {low:.4} < 0.95 ({})", cells.join(" ")))?;
    Ok(format!("lowest of 9 cells {low:.4}"))
}

/// Seed-mean validation accuracy and cost of one method at one budget.
fn operating_point(s: &RunSummary, method: &str, eval: &str, budget: f64) -> Result<(Vec<f64>, Vec<f64>), String> {
    let pts: Vec<_> = s
        .methods
        .iter()
        .filter(|p| p.method == method && p.eval == eval && p.budget == budget)
        .collect();
    ensure(pts.len() == 3, format!("{method} {eval} @ {budget}: {} seeds, expected 3", pts.len()))?;
    Ok((pts.iter().map(|p| p.val_accuracy).collect(), pts.iter().map(|p| p.cost).collect()))
}

fn warm_start(s: &RunSummary) -> Check {
    let mut out = Vec::new();
    for (budget, min_acc, max_cost) in [(0.25, 0.98, 0.35), (0.5, 0.99, 0.55)] {
        let (acc, cost) = operating_point(s, WARM, "soft", budget)?;
        let (a, c) = (mean(&acc), mean(&cost));
        let line = format!("B={budget}: accuracy {a:.4} at cost {c:.3}");
        ensure(a >= min_acc && c <= max_cost, format!("{line}, need >= {min_acc} at <= {max_cost}"))?;
        out.push(line);
    }
    Ok(out.join("; "))
}

fn scratch_fragility(s: &RunSummary) -> Check {
    let (acc, _) = operating_point(s, SCRATCH, "soft", 0.5)?;
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let line = format!("per-seed accuracy {acc:.4?}, spread {:.1} points", 100.0 * (hi - lo));
    ensure(hi - lo >= 0.10 || lo < 0.90, format!("{line}; no seed below 0.90"))?;
    Ok(line)
}

fn controllability(s: &RunSummary) -> Check {
    let checks = &s.sweep.checks;
    ensure(!checks.is_empty(), "no sweeps recorded")?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed || c.points != 38)
        .map(|c| format!("{} seed {} ({} points): {}", c.method, c.seed, c.points, c.detail))
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    Ok(format!("{} checkpoints, 19 soft and 19 hard points each", checks.len()))
}

fn adaptation(s: &RunSummary) -> Check {
    ensure(s.adaptation.len() == 3, format!("{} adapted seeds, expected 3", s.adaptation.len()))?;
    let gain = mean(&s.adaptation.iter().map(|a| a.after - a.before).collect::<Vec<_>>());
    let per_seed: Vec<String> = s
        .adaptation
        .iter()
        .map(|a| format!("{:.4}->{:.4}", a.before, a.after))
        .collect();
    let line = format!("hard-mask accuracy at B={ADAPT_BUDGET}: {}, mean gain {:+.1} points", per_seed.join(" "), 100.0 * gain);
    ensure(gain >= 0.02, line.clone())?;
    Ok(line)
}

fn latency(s: &RunSummary) -> Check {
    let row = |variant: Variant| {
        s.latency
            .iter()
            .find(|r| r.method == ADAPTED && r.variant == variant && r.budget == Some(ADAPT_BUDGET))
            .ok_or_else(|| format!("no {} row at B={ADAPT_BUDGET}", variant.as_str()))
    };
    let hard = row(Variant::HardSkip)?;
    let soft = row(Variant::Soft)?;
    let line = format!(
        "hard_skip {:.2}x (per seed {:.2?}), soft {:.2}x",
        hard.speedup_mean,
        hard.speedup_per_seed.values().collect::<Vec<_>>(),
        soft.speedup_mean
    );
    ensure(hard.speedup_mean >= 1.10 && soft.speedup_mean < 1.05, line.clone())?;
    Ok(line)
}

fn rank_stability(s: &RunSummary) -> Check {
    let warm: Vec<_> = s.sweep.ranks.iter().filter(|r| r.method == WARM).collect();
    ensure(warm.len() == 3, format!("{} warm-start seeds with rank statistics", warm.len()))?;
    let mut parts = Vec::new();
    for r in &warm {
        let st = &r.stability;
        ensure(st.retention.is_finite() && (0.0..=1.0).contains(&st.retention), format!("seed {}: bad retention", r.seed))?;
        let rho = st.spearman.map_or("undefined".to_string(), |v| format!("{v:.3}"));
        parts.push(format!("seed {} spearman {rho} retention {:.3}", r.seed, st.retention));
    }
    Ok(parts.join("; "))
}

fn oracle_equivalences() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Floored top-k against exhaustive enumeration on 4x4 grids.
    for _ in 0..50 {
        let scores: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let a = Array::from_vec(&[4, 4], scores.clone()).map_err(|e| e.to_string())?;
        for k in 4..=16 {
            let got = select_top_k(&a, k, true).map_err(|e| e.to_string())?;
            ensure(got.data() == &oracles::enumerate_best(&scores, 4, 4, k, true)[..], format!("floored top-{k} differs"))?;
        }
    }

    // Head scores against masking each head by hand on a 2x2 model.
    let cfg = ModelConfig {
        vocab_size: budgeted_attention::data::marked_vocab_size(3),
        seq_len: 8,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 8,
        num_classes: 2,
        dropout: 0.0,
    };
    let model = EncoderModel::new(cfg, 17).map_err(|e| e.to_string())?;
    let val = gen_marked(3, 50, 8, 3).map_err(|e| e.to_string())?;
    let imp = score_heads(&model, &val).map_err(|e| e.to_string())?;
    let base = oracles::dense_loss(&model, &val);
    for l in 0..2 {
        for h in 0..2 {
            let want = oracles::dense_loss(&oracles::without_head(&model, l, h), &val) - base;
            ensure((imp.scores.get2(l, h) - want).abs() < 1e-9, format!("head ({l}, {h}) score differs"))?;
        }
    }

    // Hard skipping against masked dense attention on 100 random cases.
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let (layers, heads) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let cfg = ModelConfig {
            vocab_size: 12,
            seq_len: 7,
            hidden: 4 * heads,
            layers,
            heads,
            ffn_dim: 10,
            num_classes: 3,
            dropout: 0.0,
        };
        let model = EncoderModel::new(cfg.clone(), case).map_err(|e| e.to_string())?;
        let batch = rng.gen_range(1..4);
        let ids = (0..batch * cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let t = TokenBatch::new(ids, cfg.seq_len).map_err(|e| e.to_string())?;
        let values = (0..layers * heads).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let m = HeadMask::new(Array::from_vec(&[layers, heads], values).unwrap(), MaskKind::HardGlobal, None)
            .map_err(|e| e.to_string())?;
        let gated = model.forward_gated(&t, &m).map_err(|e| e.to_string())?;
        let skip = model.forward_hard_skip(&t, &m).map_err(|e| e.to_string())?;
        worst = worst.max(gated.max_abs_diff(&skip));
    }
    ensure(worst < 1e-9, format!("hard skip differs from gated forward by {worst:e}"))?;

    // Budgeted loss decomposition and distillation at identical logits.
    for _ in 0..200 {
        let logits = Array::from_vec(&[4, 3], (0..12).map(|_| rng.gen_range(-6.0..6.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let (cost, budget) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.01..=1.0));
        let (lambda, beta) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..10.0));
        let t = budgeted_loss(&logits, &labels, cost, budget, lambda, beta).map_err(|e| e.to_string())?;
        let over = f64::max(cost - budget, 0.0);
        let rest = t.total - t.ce - lambda * cost - beta * over * over;
        ensure(rest.abs() <= 1e-12, format!("loss decomposition residual {rest:e}"))?;
        ensure(distill_kl(&logits, &logits, rng.gen_range(0.5..4.0)) == 0.0, "KL of identical logits is not 0")?;
    }

    // Spearman against the rank-difference formula on all permutations of 5.
    let perms = oracles::permutations(5);
    for p in &perms {
        for q in &perms {
            let x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let got = spearman(&x, &y).map_err(|e| e.to_string())?;
            ensure((got - oracles::rank_difference_spearman(p, q)).abs() < 1e-12, format!("spearman {p:?} {q:?}"))?;
        }
    }
    Ok(format!("all oracles agree in {:.1}s", started.elapsed().as_secs_f64()))
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let model = oracles::gated_model(1);
    let params = oracles::all_params(&model);
    let objective = oracles::budgeted_objective(&model);
    let mut worst = (String::new(), 0.0f64);
    for name in params.keys() {
        let report = grad_check(&params, name, DEFAULT_FD_STEP, &objective).map_err(|e| e.to_string())?;
        if report.max_rel_err > worst.1 {
            worst = (name.clone(), report.max_rel_err);
        }
    }
    ensure(worst.1 < 1e-4, format!("{}: relative error {:e}", worst.0, worst.1))?;
    for (name, st, soft) in oracles::straight_through_and_soft_grads(&oracles::gated_model(2), 0.3) {
        let same = st.iter().zip(&soft).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && soft.iter().any(|v| *v != 0.0), format!("straight-through gradient of {name} differs"))?;
    }
    Ok(format!(
        "{} arrays, worst relative error {:.1e} ({}); straight-through exact; {:.1}s",
        params.len(),
        worst.1,
        worst.0,
        started.elapsed().as_secs_f64()
    ))
}

fn load_run() -> Result<RunSummary, String> {
    let root = workspace_root();
    // Relative overrides are taken from the workspace root, not the crate.
    let path = |var: &str, default: &str| root.join(std::env::var_os(var).map_or(PathBuf::from(default), PathBuf::from));
    let dir = path("BUDATTN_ACCEPTANCE_DIR", "target/acceptance/robust");
    let cfg_path = path("BUDATTN_ACCEPTANCE_CONFIG", "configs/robust.cfg");
    let cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let workers = worker_count().map_err(|e| e.to_string())?;
    let run = Reproduction::open(cfg, &dir, workers).map_err(|e| e.to_string())?;
    println!("reproduction run in {} (resumed from its manifest)", dir.display());
    run.run_all().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Check)> = vec![
        (7, "oracle equivalences", oracle_equivalences()),
        (8, "gradient suite", gradient_suite()),
    ];
    match load_run() {
        Ok(s) => {
            results.push((1, "dense reliability", dense_reliability(&s)));
            results.push((2, "warm-start budgeted", warm_start(&s)));
            results.push((3, "from-scratch fragility", scratch_fragility(&s)));
            results.push((4, "monotone controllability", controllability(&s)));
            results.push((5, "hard adaptation", adaptation(&s)));
            results.push((6, "hard-skip latency", latency(&s)));
            results.push((9, "gate-ranking stability", rank_stability(&s)));
        }
        Err(e) => {
            for (n, name) in [
                (1, "dense reliability"),
                (2, "warm-start budgeted"),
                (3, "from-scratch fragility"),
                (4, "monotone controllability"),
                (5, "hard adaptation"),
                (6, "hard-skip latency"),
                (9, "gate-ranking stability"),
            ] {
                results.push((n, name, Err(format!("reproduction failed: {e}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail}");
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
