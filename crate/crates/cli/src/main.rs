use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use osev_core::checkpoint::{self, CheckpointForm};
use osev_core::config::RunConfig;
use osev_core::data::{generate, Dataset, SyntheticSpec};
use osev_core::gradsuite::{run_suite, SuiteOptions};
use osev_core::metrics::write_score_dump;
use osev_core::pipeline::{evaluate, loss_csv, train_with};
use osev_core::sweep::{aggregate, run_sweep, SweepJob};
use osev_core::Error;

#[derive(Parser)]
#[command(name = "osev", version, about = "Evidential open-set experiments on synthetic biased sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path; curve CSV and score dumps go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Drop the evidence derivative from the composed model (negative control).
        #[arg(long)]
        inject_bug: bool,
    },
    /// Run every config in a directory over several seeds.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure that maps to a process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidSpec { .. } | Error::Parse { .. } | Error::InvalidArgument { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 3,
            Error::CheckpointMismatch(_) => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Append-only log; the only place timestamps are written.
struct RunLog(Mutex<fs::File>);

impl RunLog {
    fn create(path: &Path) -> Result<Self, Failure> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        Ok(RunLog(Mutex::new(file)))
    }

    fn line(&self, message: &str) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut f = self.0.lock().expect("log file");
        let _ = writeln!(f, "{now:.3} {message}");
    }
}

fn generate_data(spec: &Path, out: &Path) -> CmdResult {
    let spec = SyntheticSpec::load(spec)?;
    let data = generate(&spec)?;
    data.save(out)?;
    log::info!("wrote {} samples to {}", data.train.len() + data.test_biased.len() + data.test_unbiased.len() + data.test_unknown.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let data = Dataset::load(&cfg.data)?;
    let log = RunLog::create(&out.join("train.log"))?;
    log.line(&format!("train {}", config.display()));
    let result = train_with(&cfg, &data, |r| {
        log::info!(
            "epoch {:>3} lambda_t {:.4} edl {:.4} euc {:.4} ced {:.4} total {:.4}",
            r.epoch, r.lambda_t, r.edl, r.euc, r.ced, r.total
        );
        log.line(&format!("epoch {} total {}", r.epoch, r.total));
    });
    let mut run = match result {
        Ok(run) => run,
        Err(e) => {
            log.line(&format!("failed: {e}"));
            return Err(e.into());
        }
    };
    write(&out.join("loss.csv"), loss_csv(&run.history))?;
    let epochs = run.history.len();
    checkpoint::save(&mut run.model, &cfg, CheckpointForm::Full, epochs, out, "checkpoint")?;
    let model = checkpoint::save(&mut run.model, &cfg, CheckpointForm::Stripped, epochs, out, "model")?;
    log.line("done");
    println!("{}", model.display());
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}{suffix}"))
}

fn eval(checkpoint_path: &Path, data: &Path, out: &Path) -> CmdResult {
    let (meta, model) = checkpoint::load(checkpoint_path)?;
    let mut cfg = RunConfig::parse(&meta.config, Path::new(""))?;
    cfg.data = data.to_path_buf();
    let dataset = Dataset::load(data)?;
    let evaluation = evaluate(&model.inference(), &dataset, &cfg)?;
    let report = &evaluation.report;
    write(out, json(report))?;
    write(&sibling(out, "_curve.csv"), report.open_set.open_maf1.curve_csv())?;
    for (kind, records) in evaluation.dumps() {
        write(&sibling(out, &format!("_scores_{}.jsonl", kind.name())), write_score_dump(records)?)?;
    }
    let o = &report.open_set;
    println!(
        "biased_acc {:.4} unbiased_acc {:.4} open_maf1 {:.4} open_auc {:.4} ece_open {:.4}",
        report.biased_acc, report.unbiased_acc, o.open_maf1.value, o.open_auc, o.ece_open
    );
    Ok(())
}

fn gradcheck(config: &Path, instances: usize, inject_bug: bool) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let opts = SuiteOptions {
        instances,
        seed: cfg.seed,
        inject_bug,
        ..SuiteOptions::default()
    };
    let report = run_suite(cfg.evidence, &opts)?;
    for check in &report.checks {
        println!(
            "{:<22} instances {:>3}  max rel err {:.3e}  {}",
            check.name,
            check.instances,
            check.max_rel_err,
            if check.failing.is_empty() { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        return Ok(());
    }
    let mut message = format!("gradient check failed (tolerance {:.0e}):", report.tolerance);
    for check in report.checks.iter().filter(|c| !c.failing.is_empty()) {
        for entry in &check.failing {
            message.push_str(&format!("\n  {}: {entry}", check.name));
        }
    }
    Err(Failure { code: 5, message })
}

fn sweep_threads() -> usize {
    std::env::var("OSEV_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn sweep(configs: &Path, seeds: usize, out: &Path) -> CmdResult {
    if seeds == 0 {
        return Err(Error::InvalidArgument {
            name: "seeds",
            message: "must be positive".into(),
        }
        .into());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(configs)
        .map_err(|e| io_err(configs, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("no .cfg files in {}", configs.display()),
        });
    }
    let jobs = paths
        .iter()
        .map(|p| {
            Ok(SweepJob {
                name: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                config: RunConfig::load(p)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let threads = sweep_threads();
    let log = RunLog::create(&out.join("sweep.log"))?;
    log.line(&format!("{} configs x {seeds} seeds on {threads} threads", jobs.len()));
    let results = run_sweep(&jobs, seeds, threads, |job, r| match &r.outcome {
        Ok(_) => log.line(&format!("{} seed {} ok", job.name, r.seed_index)),
        Err(e) => log.line(&format!("{} seed {} failed: {e}", job.name, r.seed_index)),
    });
    let mut failures = 0;
    for r in &results {
        let dir = out.join("runs").join(&jobs[r.job].name).join(format!("seed-{}", r.seed_index));
        match &r.outcome {
            Ok((history, report)) => {
                write(&dir.join("loss.csv"), loss_csv(history))?;
                write(&dir.join("report.json"), json(report))?;
            }
            Err(e) => {
                failures += 1;
                log::warn!("{} seed {} failed: {e}", jobs[r.job].name, r.seed_index);
            }
        }
    }
    let summary = aggregate(&jobs, seeds, &results);
    write(&out.join("summary.json"), json(&summary))?;
    write(&out.join("summary.csv"), summary.to_csv())?;
    log.line("done");
    println!("{} runs, {failures} failed; summary in {}", results.len(), out.join("summary.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData { spec, out } => generate_data(spec, out),
        Command::Train { config, out } => train(config, out),
        Command::Eval { checkpoint, data, out } => eval(checkpoint, data, out),
        Command::Gradcheck {
            config,
            instances,
            inject_bug,
        } => gradcheck(config, *instances, *inject_bug),
        Command::Sweep { configs, seeds, out } => sweep(configs, *seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
