//! Single-thread inference latency for dense, soft-gated and head-skipping
//! execution, and per-seed speedup aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Example};
use crate::error::{Error, Result};
use crate::evaluation::{argmax, mean_std};
use crate::gating::{hard_mask_for_budget, soft_gates, HeadMask};
use crate::model::{EncoderModel, Execution};

/// Restricts the calling thread to one CPU and checks that the restriction
/// took effect. Returns the CPU index.
#[cfg(target_os = "linux")]
pub fn pin_current_thread() -> Result<usize> {
    // SAFETY: cpu_set_t is plain data; the libc calls receive its exact size.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        let size = std::mem::size_of::<libc::cpu_set_t>();
        if libc::sched_getaffinity(0, size, &mut set) != 0 {
            return Err(Error::ThreadPinning(format!(
                "sched_getaffinity failed: {}",
                std::io::Error::last_os_error()
            )));
        }
        let cpu = (0..libc::CPU_SETSIZE as usize)
            .find(|&c| libc::CPU_ISSET(c, &set))
            .ok_or_else(|| Error::ThreadPinning("affinity mask is empty".into()))?;
        let mut one: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut one);
        if libc::sched_setaffinity(0, size, &one) != 0 {
            return Err(Error::ThreadPinning(format!(
                "sched_setaffinity failed: {}",
                std::io::Error::last_os_error()
            )));
        }
        let mut check: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, size, &mut check) != 0 || libc::CPU_COUNT(&check) != 1 || !libc::CPU_ISSET(cpu, &check)
        {
            return Err(Error::ThreadPinning(format!("thread is not confined to cpu {cpu}")));
        }
        Ok(cpu)
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread() -> Result<usize> {
    Err(Error::ThreadPinning("thread pinning is only implemented on Linux".into()))
}

/// Machine description embedded in every latency report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub kernel: String,
    pub arch: String,
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub pinned_cpu: usize,
    pub compute_threads: usize,
    pub profile: String,
}

fn first_line_with(path: &str, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .find(|l| l.starts_with(key))
        .and_then(|l| l.split_once(['=', ':']))
        .map(|(_, v)| v.trim().trim_matches('"').to_string())
}

pub fn capture_environment(pinned_cpu: usize) -> Environment {
    Environment {
        os: first_line_with("/etc/os-release", "PRETTY_NAME").unwrap_or_else(|| std::env::consts::OS.to_string()),
        kernel: std::fs::read_to_string("/proc/sys/kernel/osrelease")
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| "unknown".into()),
        arch: std::env::consts::ARCH.to_string(),
        cpu_model: first_line_with("/proc/cpuinfo", "model name").unwrap_or_else(|| "unknown".into()),
        logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        pinned_cpu,
        compute_threads: 1,
        profile: if cfg!(debug_assertions) { "debug" } else { "optimized" }.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    Soft,
    HardSkip,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Soft => "soft",
            Variant::HardSkip => "hard_skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub seed: u64,
    pub variant: Variant,
    pub budget: Option<f64>,
    pub examples: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Wall time of each timed full-split pass.
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub accuracy: f64,
    pub active_heads: usize,
    pub environment: Environment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub warmup: usize,
    pub repeats: usize,
    pub batch_size: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            warmup: 2,
            repeats: 5,
            batch_size: 64,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The mask a variant executes with, if any.
pub fn variant_mask(model: &EncoderModel, variant: Variant, budget: Option<f64>) -> Result<Option<HeadMask>> {
    let need = || budget.ok_or_else(|| Error::InvalidBudget(f64::NAN));
    Ok(match variant {
        Variant::Dense => None,
        Variant::Soft => Some(soft_gates(model.gate_params()?, need()?)?),
        Variant::HardSkip => Some(hard_mask_for_budget(model.gate_params()?, need()?, false)?),
    })
}

fn run_pass(model: &EncoderModel, prepared: &[Batch], exec: Execution<'_>) -> Result<Vec<usize>> {
    let mut preds = Vec::new();
    for b in prepared {
        let logits = model.infer(&b.tokens, exec, None)?;
        let c = logits.last_dim();
        preds.extend(logits.data().chunks_exact(c).map(argmax));
    }
    Ok(preds)
}

/// Times `repeats` full passes over pre-batched `examples` after `warmup`
/// untimed passes. Pins the calling thread first and fails if it cannot.
pub fn measure_latency(
    model: &EncoderModel,
    examples: &[Example],
    variant: Variant,
    budget: Option<f64>,
    seed: u64,
    settings: BenchSettings,
) -> Result<LatencyReport> {
    if settings.repeats == 0 {
        return Err(Error::Empty("latency measurement needs at least one repeat".into()));
    }
    let cpu = pin_current_thread()?;
    let environment = capture_environment(cpu);
    let prepared = batches(examples, settings.batch_size)?;
    let mask = variant_mask(model, variant, budget)?;
    let exec = match (&mask, variant) {
        (None, _) => Execution::Dense,
        (Some(m), Variant::HardSkip) => Execution::HardSkip(m),
        (Some(m), _) => Execution::Gated(m),
    };
    let active_heads = mask
        .as_ref()
        .map_or(model.config.total_heads(), |m| if m.is_binary() { m.active_count() } else { model.config.total_heads() });

    for _ in 0..settings.warmup {
        std::hint::black_box(run_pass(model, &prepared, exec)?);
    }
    let mut times_ms = Vec::with_capacity(settings.repeats);
    let mut first: Option<Vec<usize>> = None;
    for _ in 0..settings.repeats {
        let start = Instant::now();
        let preds = std::hint::black_box(run_pass(model, &prepared, exec)?);
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
        match &first {
            None => first = Some(preds),
            Some(p) if *p != preds => {
                return Err(Error::CheckFailed {
                    check: "timed_passes_identical",
                    detail: "repeated passes produced different predictions".into(),
                })
            }
            _ => {}
        }
    }
    let preds = first.expect("at least one repeat");
    let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    let (mean_ms, _) = mean_std(&times_ms);
    Ok(LatencyReport {
        seed,
        variant,
        budget,
        examples: examples.len(),
        batch_size: settings.batch_size,
        warmup: settings.warmup,
        median_ms: median(&times_ms),
        mean_ms,
        times_ms,
        accuracy: correct as f64 / examples.len() as f64,
        active_heads,
        environment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Per-seed `dense_median / method_median`.
    pub ratios: BTreeMap<u64, f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample deviation of per-seed dense/method median ratios.
pub fn speedup(dense: &BTreeMap<u64, f64>, method: &BTreeMap<u64, f64>) -> Result<Speedup> {
    if dense.is_empty() {
        return Err(Error::SeedMismatch("no seeds".into()));
    }
    if dense.keys().ne(method.keys()) {
        return Err(Error::SeedMismatch(format!(
            "dense seeds {:?} vs method seeds {:?}",
            dense.keys().collect::<Vec<_>>(),
            method.keys().collect::<Vec<_>>()
        )));
    }
    let ratios: BTreeMap<u64, f64> = dense.iter().map(|(s, d)| (*s, d / method[s])).collect();
    let (mean, std) = mean_std(&ratios.values().copied().collect::<Vec<_>>());
    Ok(Speedup { ratios, mean, std })
}

/// [`speedup`] over reports keyed by seed, using their medians.
pub fn report_speedup(dense: &[LatencyReport], method: &[LatencyReport]) -> Result<Speedup> {
    let by_seed = |r: &[LatencyReport]| -> Result<BTreeMap<u64, f64>> {
        let mut m = BTreeMap::new();
        for x in r {
            if m.insert(x.seed, x.median_ms).is_some() {
                return Err(Error::SeedMismatch(format!("seed {} appears twice", x.seed)));
            }
        }
        Ok(m)
    };
    speedup(&by_seed(dense)?, &by_seed(method)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(pairs: &[(u64, f64)]) -> BTreeMap<u64, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn speedup_averages_ratios() {
        let s = speedup(&m(&[(7, 2000.0), (13, 1000.0)]), &m(&[(7, 1000.0), (13, 1000.0)])).unwrap();
        assert_eq!(s.mean, 1.5);
        let s = speedup(&m(&[(7, 5.0), (13, 3.0)]), &m(&[(7, 5.0), (13, 3.0)])).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        assert!(matches!(
            speedup(&m(&[(7, 1.0)]), &m(&[(13, 1.0)])),
            Err(Error::SeedMismatch(_))
        ));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.5]), 7.5);
    }
}
