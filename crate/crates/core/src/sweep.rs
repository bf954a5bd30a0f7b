//! Multi-seed runs over a grid of configurations.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::pipeline::{train_and_evaluate, EpochRecord, MetricsReport};
use crate::rng::derive_seed;

/// Metrics aggregated across seeds, in summary order.
pub const SWEEP_METRICS: [&str; 8] = [
    "biased_acc",
    "unbiased_acc",
    "open_auc",
    "open_maf1",
    "ece_open",
    "ece_open_binary",
    "ece_closed",
    "avu",
];

pub fn metric_values(r: &MetricsReport) -> [f64; 8] {
    let o = &r.open_set;
    [
        r.biased_acc,
        r.unbiased_acc,
        o.open_auc,
        o.open_maf1.value,
        o.ece_open,
        o.ece_open_binary,
        o.ece_closed,
        o.avu,
    ]
}

#[derive(Debug, Clone)]
pub struct SweepJob {
    pub name: String,
    pub config: RunConfig,
}

/// Seed of the `index`-th repetition of a configuration.
pub fn run_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, index as u64)
}

#[derive(Debug)]
pub struct RunResult {
    pub job: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<(Vec<EpochRecord>, MetricsReport), String>,
}

fn run_one(cfg: &RunConfig) -> Result<(Vec<EpochRecord>, MetricsReport)> {
    let data = Dataset::load(&cfg.data)?;
    let (run, eval) = train_and_evaluate(cfg, &data)?;
    Ok((run.history, eval.report))
}

/// Runs every job for `seeds` seeds on up to `threads` workers. Results come
/// back in (job, seed) order whatever the thread count; `on_done` sees them
/// in completion order.
pub fn run_sweep(
    jobs: &[SweepJob],
    seeds: usize,
    threads: usize,
    on_done: impl Fn(&SweepJob, &RunResult) + Sync,
) -> Vec<RunResult> {
    let total = jobs.len() * seeds;
    let slots: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..total).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, total.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= total {
                    break;
                }
                let (job, seed_index) = (idx / seeds, idx % seeds);
                let seed = run_seed(&jobs[job].config, seed_index);
                let cfg = RunConfig {
                    seed,
                    ..jobs[job].config.clone()
                };
                let result = RunResult {
                    job,
                    seed_index,
                    seed,
                    outcome: run_one(&cfg).map_err(|e| e.to_string()),
                };
                on_done(&jobs[job], &result);
                slots.lock().expect("sweep slots")[idx] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|r| r.expect("every run finishes"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over successful runs.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed_index: usize,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub name: String,
    pub runs: Vec<RunStatus>,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: usize,
    pub configs: Vec<ConfigSummary>,
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(jobs: &[SweepJob], seeds: usize, results: &[RunResult]) -> SweepSummary {
    let configs = jobs
        .iter()
        .enumerate()
        .map(|(j, job)| {
            let mine: Vec<&RunResult> = results.iter().filter(|r| r.job == j).collect();
            let ok: Vec<[f64; 8]> = mine
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok().map(|(_, rep)| metric_values(rep)))
                .collect();
            let metrics = SWEEP_METRICS
                .iter()
                .enumerate()
                .map(|(m, name)| {
                    let vals: Vec<f64> = ok.iter().map(|v| v[m]).collect();
                    let (mean, std) = mean_std(&vals);
                    MetricSummary {
                        metric: name.to_string(),
                        mean,
                        std,
                        n: vals.len(),
                    }
                })
                .collect();
            ConfigSummary {
                name: job.name.clone(),
                runs: mine
                    .iter()
                    .map(|r| RunStatus {
                        seed_index: r.seed_index,
                        seed: r.seed,
                        error: r.outcome.as_ref().err().cloned(),
                    })
                    .collect(),
                metrics,
            }
        })
        .collect();
    SweepSummary { seeds, configs }
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,metric,mean,std,n\n");
        for c in &self.configs {
            for m in &c.metrics {
                let _ = writeln!(s, "{},{},{},{},{}", c.name, m.metric, m.mean, m.std, m.n);
            }
        }
        s
    }
}
