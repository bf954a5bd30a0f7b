//! End-to-end training and evaluation runs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::config::{HeadKind, RunConfig};
use crate::data::{Dataset, DatasetSplit, SplitKind};
use crate::debias::{CedBranches, CedStep};
use crate::error::{Error, Result};
use crate::evidential::threshold_from_train_scores;
use crate::losses::AnnealingSchedule;
use crate::metrics::{
    accuracy, open_set_metrics, EvalSettings, OpenLabel, OpenSetMetrics, OpenSetRecord,
};
use crate::model::{Classifier, StepRecord};
use crate::rng::{derive_seed, seeded};

/// Per-stream seed offsets derived from the run seed.
const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Batch-averaged loss terms for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda_t: f64,
    pub lr: f64,
    pub edl: f64,
    pub euc: f64,
    pub ced: f64,
    pub hsic_shuffled: f64,
    pub hsic_static: f64,
    pub total: f64,
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lambda_t,lr,edl,euc,ced,hsic_shuffled,hsic_static,total\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.lambda_t, r.lr, r.edl, r.euc, r.ced, r.hsic_shuffled, r.hsic_static, r.total
        );
    }
    s
}

pub fn init_model(cfg: &RunConfig, in_channels: usize, num_classes: usize) -> Result<TrainedModel> {
    let mut rng = seeded(derive_seed(cfg.seed, INIT_STREAM));
    Ok(if cfg.use_ced {
        TrainedModel::Ced(CedBranches::new(
            &cfg.arch,
            in_channels,
            num_classes,
            cfg.evidence,
            &mut rng,
        )?)
    } else {
        TrainedModel::Single(Classifier::new(
            &cfg.arch,
            in_channels,
            num_classes,
            cfg.output_kind(),
            &mut rng,
        )?)
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

fn check_data(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let need = cfg.arch.min_timesteps();
    if data.manifest.spec.timesteps < need {
        return Err(Error::invalid(
            "timesteps",
            format!(
                "architecture needs at least {need} timesteps, data has {}",
                data.manifest.spec.timesteps
            ),
        ));
    }
    if data.train.len() < 2 {
        return Err(Error::Empty("train split"));
    }
    Ok(())
}

/// Trains the configured model, calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let k = data.known_classes();
    let mut model = init_model(cfg, data.manifest.channels, k)?;
    let mut order_rng = seeded(derive_seed(cfg.seed, ORDER_STREAM));
    let mut shuffle_rng = seeded(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let schedule = AnnealingSchedule::new(cfg.lambda0, cfg.epochs - 1)?;
    let labels = data.train.labels();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lambda_t = schedule.lambda_at(epoch);
        let sgd = crate::nn::Sgd {
            lr: cfg.lr_schedule.rate(cfg.sgd.lr, epoch),
            ..cfg.sgd
        };
        order.shuffle(&mut order_rng);
        let mut sum = StepRecord::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.train.batch(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let euc = cfg.use_euc.then_some((cfg.weights.w_euc, lambda_t));
            let result = match &mut model {
                TrainedModel::Single(c) => c.train_step(&x, &y, euc, &sgd),
                TrainedModel::Ced(c) => {
                    let opts = CedStep {
                        mode: cfg.ced_mode,
                        weights: cfg.weights,
                        euc_lambda: euc.map(|e| e.1),
                        kernel: cfg.kernel,
                    };
                    c.train_step(&x, &y, &opts, &sgd, step, &mut shuffle_rng)
                }
            };
            let rec = result.map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
                other => other,
            })?;
            sum.edl += rec.edl;
            sum.euc += rec.euc;
            sum.ced += rec.ced;
            sum.hsic_shuffled += rec.hsic_shuffled;
            sum.hsic_static += rec.hsic_static;
            sum.total += rec.total;
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lambda_t,
            lr: sgd.lr,
            edl: sum.edl / n,
            euc: sum.euc / n,
            ced: sum.ced / n,
            hsic_shuffled: sum.hsic_shuffled / n,
            hsic_static: sum.hsic_static / n,
            total: sum.total / n,
        };
        log::debug!("epoch {epoch}: {record:?}");
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainRun { model, history })
}

pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainRun> {
    train_with(cfg, data, |_| {})
}

/// Scores every sample of a split. Samples whose class id is `>= k` are
/// labelled unknown.
pub fn score_split(model: &mut Classifier, split: &DatasetSplit) -> Result<Vec<OpenSetRecord>> {
    if split.is_empty() {
        return Ok(Vec::new());
    }
    let k = model.num_classes();
    let scored = model.predict(&split.all())?;
    Ok(scored
        .into_iter()
        .zip(&split.samples)
        .map(|(s, sample)| {
            let known = sample.class < k;
            OpenSetRecord {
                probs: s.probs,
                score: s.score,
                label: if known {
                    OpenLabel::Known(sample.class)
                } else {
                    OpenLabel::Unknown
                },
                unknown_class: (!known).then_some(sample.class),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub known_classes: usize,
    pub head: HeadKind,
    pub coverage: f64,
    /// Fraction of training samples at or below the threshold.
    pub train_known_fraction: f64,
    /// Closed-set accuracy on the scene-biased test split.
    pub biased_acc: f64,
    /// Closed-set accuracy on the scene-balanced test split.
    pub unbiased_acc: f64,
    /// Open-set metrics on the biased known split plus the unknown split.
    pub open_set: OpenSetMetrics,
    pub settings: EvalSettings,
    pub seed: u64,
    /// Canonical rendering of the run configuration.
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub train: Vec<OpenSetRecord>,
    pub biased: Vec<OpenSetRecord>,
    pub unbiased: Vec<OpenSetRecord>,
    pub unknown: Vec<OpenSetRecord>,
}

impl Evaluation {
    pub fn dumps(&self) -> [(SplitKind, &[OpenSetRecord]); 4] {
        [
            (SplitKind::Train, &self.train),
            (SplitKind::TestBiased, &self.biased),
            (SplitKind::TestUnbiased, &self.unbiased),
            (SplitKind::TestUnknown, &self.unknown),
        ]
    }
}

pub fn eval_settings(cfg: &RunConfig) -> EvalSettings {
    EvalSettings {
        ece_bins: cfg.ece_bins,
        selections: cfg.selections,
        avu_threshold: cfg.avu_threshold,
        seed: derive_seed(cfg.seed, EVAL_STREAM),
    }
}

/// Thresholds on the train split, then scores and reports every test split.
pub fn evaluate(model: &Classifier, data: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let k = data.known_classes();
    if model.num_classes() != k {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} classes, data has {k}",
            model.num_classes()
        )));
    }
    if model.branch.in_channels() != data.manifest.channels {
        return Err(Error::CheckpointMismatch(format!(
            "model expects {} channels, data has {}",
            model.branch.in_channels(),
            data.manifest.channels
        )));
    }
    let mut model = model.clone();
    let train = score_split(&mut model, &data.train)?;
    let biased = score_split(&mut model, &data.test_biased)?;
    let unbiased = score_split(&mut model, &data.test_unbiased)?;
    let unknown = score_split(&mut model, &data.test_unknown)?;

    let train_scores: Vec<f64> = train.iter().map(|r| r.score).collect();
    let tau = threshold_from_train_scores(&train_scores, cfg.coverage)?;
    let settings = eval_settings(cfg);
    let open_set = open_set_metrics(&biased, &unknown, tau, &settings)?;
    let known_fraction =
        train_scores.iter().filter(|&&s| s <= tau).count() as f64 / train_scores.len() as f64;
    let report = MetricsReport {
        known_classes: k,
        head: cfg.head,
        coverage: cfg.coverage,
        train_known_fraction: known_fraction,
        biased_acc: open_set.closed_acc,
        unbiased_acc: closed_accuracy(&unbiased, k),
        open_set,
        settings,
        seed: cfg.seed,
        config: cfg.to_kv_string(),
    };
    Ok(Evaluation {
        report,
        train,
        biased,
        unbiased,
        unknown,
    })
}

/// Trains, then evaluates the inference branch.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Dataset) -> Result<(TrainRun, Evaluation)> {
    let run = train(cfg, data)?;
    let eval = evaluate(&run.model.inference(), data, cfg)?;
    Ok((run, eval))
}

pub fn closed_accuracy(records: &[OpenSetRecord], k: usize) -> f64 {
    let preds: Vec<usize> = records.iter().map(|r| crate::evidential::argmax(&r.probs).0).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label.index(k)).collect();
    accuracy(&preds, &labels)
}
