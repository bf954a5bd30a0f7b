//! Open-set evaluation: thresholds, macro-F1 over an openness sweep, AUC,
//! calibration and confusion reporting.

use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::argmax;
use crate::losses::{avu_utility, median_uncertainty, EucSample};
use crate::rng::{derive_seed, seeded};

/// `1 - sqrt(2K / (2K + i))`.
pub fn openness(k: usize, i: usize) -> f64 {
    1.0 - (2.0 * k as f64 / (2 * k + i) as f64).sqrt()
}

/// Ground truth for one open-set record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpenLabel {
    Known(usize),
    Unknown,
}

impl OpenLabel {
    /// Index in the `(K+1)`-class space, unknown mapped to `k`.
    pub fn index(self, k: usize) -> usize {
        match self {
            OpenLabel::Known(c) => c,
            OpenLabel::Unknown => k,
        }
    }
}

impl Serialize for OpenLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OpenLabel::Known(c) => s.serialize_u64(*c as u64),
            OpenLabel::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for OpenLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(OpenLabel::Known(v as usize)),
            Raw::Str(s) if s == "unknown" => Ok(OpenLabel::Unknown),
            Raw::Str(s) => Err(de::Error::custom(format!(
                "label must be an integer or \"unknown\", got {s:?}"
            ))),
        }
    }
}

/// One scored sample, as written to and read from score dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetRecord {
    pub probs: Vec<f64>,
    /// Higher means more likely unknown.
    pub score: f64,
    pub label: OpenLabel,
    /// Which unknown class produced the record, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown_class: Option<usize>,
}

impl OpenSetRecord {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.probs.is_empty() || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("probs", format!("must sum to 1, got {sum}")));
        }
        if !self.score.is_finite() {
            return Err(Error::invalid("score", "must be finite"));
        }
        if let OpenLabel::Known(c) = self.label {
            if c >= self.probs.len() {
                return Err(Error::invalid("label", format!("{c} out of range")));
            }
        }
        Ok(())
    }
}

/// Parses a JSON-lines score dump.
pub fn parse_score_dump(text: &str, path: &str) -> Result<Vec<OpenSetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let rec: OpenSetRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_score_dump(records: &[OpenSetRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// `(K+1)`-class predictions: `score > tau` means unknown (index `K`).
pub fn open_predictions(records: &[OpenSetRecord], tau: f64) -> Vec<usize> {
    records
        .iter()
        .map(|r| {
            if r.score > tau {
                r.probs.len()
            } else {
                argmax(&r.probs).0
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1. Classes absent from both predictions and
/// labels are skipped.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut label_count = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        pred_count[p] += 1;
        label_count[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        if pred_count[c] == 0 && label_count[c] == 0 {
            continue;
        }
        present += 1;
        // 2TP / (2TP + FP + FN)
        let denom = pred_count[c] + label_count[c];
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpennessPoint {
    pub i: usize,
    pub omega: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaf1 {
    pub points: Vec<OpennessPoint>,
    /// Openness-weighted mean of the per-point F1 means.
    pub value: f64,
    /// Standard deviation of the per-selection weighted means.
    pub std_over_selections: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl OpenMaf1 {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("i,omega,f1_mean,f1_std\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.i, p.omega, p.f1_mean, p.f1_std);
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Weighted mean `sum w f / sum w`.
pub fn weighted_open_maf1(points: &[(f64, f64)]) -> f64 {
    let wsum: f64 = points.iter().map(|p| p.0).sum();
    points.iter().map(|(w, f)| w * f).sum::<f64>() / wsum
}

/// Sweeps `i = 1..=max_i` introduced unknown classes. For every `i`,
/// `selections` random `i`-class subsets of the pool are drawn (seeded per
/// `(i, selection)`), and the `(K+1)`-class macro-F1 over the known records
/// plus the chosen unknown records is recorded.
pub fn open_maf1_curve(
    known: &[OpenSetRecord],
    unknown_pool: &[Vec<OpenSetRecord>],
    tau: f64,
    selections: usize,
    max_i: Option<usize>,
    seed: u64,
) -> Result<OpenMaf1> {
    if unknown_pool.is_empty() {
        return Err(Error::Empty("unknown pool"));
    }
    if known.is_empty() {
        return Err(Error::Empty("known records"));
    }
    if selections == 0 {
        return Err(Error::invalid("selections", "must be positive"));
    }
    let k = known[0].probs.len();
    let pool = unknown_pool.len();
    let mut note = None;
    let top = match max_i {
        Some(m) if m > pool => {
            note = Some(format!("sweep truncated at i = {pool}: only {pool} unknown classes available"));
            pool
        }
        Some(m) => m,
        None => pool,
    };
    if top == 0 {
        return Err(Error::invalid("max_i", "must be >= 1"));
    }
    let known_preds = open_predictions(known, tau);
    let known_labels: Vec<usize> = known.iter().map(|r| r.label.index(k)).collect();
    let unknown_preds: Vec<Vec<usize>> = unknown_pool.iter().map(|g| open_predictions(g, tau)).collect();

    let mut points = Vec::with_capacity(top);
    let mut per_selection = vec![Vec::with_capacity(top); selections];
    for i in 1..=top {
        let mut f1s = Vec::with_capacity(selections);
        for (j, sel_f1) in per_selection.iter_mut().enumerate() {
            let mut rng = seeded(derive_seed(derive_seed(seed, i as u64), j as u64));
            let mut chosen = sample(&mut rng, pool, i).into_vec();
            chosen.sort_unstable();
            let mut preds = known_preds.clone();
            let mut labels = known_labels.clone();
            for &g in &chosen {
                preds.extend_from_slice(&unknown_preds[g]);
                labels.extend(std::iter::repeat_n(k, unknown_preds[g].len()));
            }
            let f1 = macro_f1(&preds, &labels, k + 1);
            f1s.push(f1);
            sel_f1.push(f1);
        }
        let (f1_mean, f1_std) = mean_std(&f1s);
        points.push(OpennessPoint {
            i,
            omega: openness(k, i),
            f1_mean,
            f1_std,
        });
    }
    let value = weighted_open_maf1(&points.iter().map(|p| (p.omega, p.f1_mean)).collect::<Vec<_>>());
    let scalars: Vec<f64> = per_selection
        .iter()
        .map(|f1s| {
            weighted_open_maf1(&points.iter().zip(f1s).map(|(p, &f)| (p.omega, f)).collect::<Vec<_>>())
        })
        .collect();
    Ok(OpenMaf1 {
        points,
        value,
        std_over_selections: mean_std(&scalars).1,
        note,
    })
}

/// Mann-Whitney AUC: the fraction of (unknown, known) pairs where the
/// unknown score is larger, ties counted one half.
pub fn roc_auc(scores_known: &[f64], scores_unknown: &[f64]) -> Result<f64> {
    if scores_known.is_empty() {
        return Err(Error::Empty("known scores"));
    }
    if scores_unknown.is_empty() {
        return Err(Error::Empty("unknown scores"));
    }
    crate::error::ensure_finite("known scores", scores_known)?;
    crate::error::ensure_finite("unknown scores", scores_unknown)?;
    let mut known = scores_known.to_vec();
    known.sort_by(f64::total_cmp);
    // Twice the count, so ties stay integral.
    let mut twice: u64 = 0;
    for &s in scores_unknown {
        let below = known.partition_point(|&v| v < s);
        let not_above = known.partition_point(|&v| v <= s);
        twice += 2 * below as u64 + (not_above - below) as u64;
    }
    let pairs = scores_known.len() as f64 * scores_unknown.len() as f64;
    Ok((twice as f64 / 2.0) / pairs)
}

/// Expected calibration error over `num_bins` equal-width bins on `[0, 1]`.
/// A confidence of exactly 1 falls in the last bin.
pub fn ece(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::ShapeMismatch {
            op: "ece",
            expected: vec![confidences.len()],
            actual: vec![correct.len()],
        });
    }
    if num_bins == 0 {
        return Err(Error::invalid("num_bins", "must be positive"));
    }
    if confidences.is_empty() {
        return Err(Error::Empty("confidences"));
    }
    if let Some(i) = confidences.iter().position(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid(
            "confidences",
            format!("value {} at index {i} outside [0, 1]", confidences[i]),
        ));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopConfusion {
    /// Global id of the unknown class.
    pub class: usize,
    /// Fraction of its samples predicted as some known class.
    pub rate: f64,
    /// The known class it lands in most often.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// `(K+1) x (K+1)` counts, rows are truth.
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized counts; empty rows stay zero.
    pub matrix: Vec<Vec<f64>>,
    /// Unknown classes ranked by how often they are taken for known ones.
    pub top_confusions: Vec<TopConfusion>,
}

/// `preds` live in the `(K+1)`-class space; `classes` are global class ids,
/// where ids `>= k` are unknown.
pub fn confusion_and_top_confusions(preds: &[usize], classes: &[usize], k: usize) -> ConfusionReport {
    let mut counts = vec![vec![0usize; k + 1]; k + 1];
    let mut per_unknown: std::collections::BTreeMap<usize, (usize, Vec<usize>)> = Default::default();
    for (&p, &c) in preds.iter().zip(classes) {
        counts[c.min(k)][p] += 1;
        if c >= k {
            let entry = per_unknown.entry(c).or_insert_with(|| (0, vec![0; k]));
            entry.0 += 1;
            if p < k {
                entry.1[p] += 1;
            }
        }
    }
    let matrix = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
                .collect()
        })
        .collect();
    let mut top: Vec<TopConfusion> = per_unknown
        .into_iter()
        .filter_map(|(class, (total, into))| {
            let wrong: usize = into.iter().sum();
            if wrong == 0 {
                return None;
            }
            let target = (0..k).max_by_key(|&j| (into[j], std::cmp::Reverse(j))).unwrap_or(0);
            Some(TopConfusion {
                class,
                rate: wrong as f64 / total as f64,
                target,
            })
        })
        .collect();
    top.sort_by(|a, b| b.rate.total_cmp(&a.rate).then(a.class.cmp(&b.class)));
    ConfusionReport {
        counts,
        matrix,
        top_confusions: top,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub ece_bins: usize,
    pub selections: usize,
    /// `None` uses the median score.
    pub avu_threshold: Option<f64>,
    pub seed: u64,
}

/// Metrics derived from known and unknown score records at threshold `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    pub threshold: f64,
    pub closed_acc: f64,
    pub open_maf1: OpenMaf1,
    pub open_auc: f64,
    /// `(K+1)`-class ECE: confidence is max p for predicted-known samples
    /// and the score for predicted-unknown samples.
    pub ece_open: f64,
    /// Known-vs-unknown ECE.
    pub ece_open_binary: f64,
    /// `K`-class ECE on known samples only.
    pub ece_closed: f64,
    pub avu: f64,
    pub confusion: ConfusionReport,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn open_set_metrics(
    known: &[OpenSetRecord],
    unknown: &[OpenSetRecord],
    tau: f64,
    settings: &EvalSettings,
) -> Result<OpenSetMetrics> {
    if known.is_empty() {
        return Err(Error::Empty("known records"));
    }
    if unknown.is_empty() {
        return Err(Error::Empty("unknown records"));
    }
    let k = known[0].probs.len();
    for r in known.iter().chain(unknown) {
        r.validate()?;
        if r.probs.len() != k {
            return Err(Error::invalid("records", "inconsistent class counts"));
        }
    }
    let known_labels: Vec<usize> = known.iter().map(|r| r.label.index(k)).collect();
    let closed_preds: Vec<usize> = known.iter().map(|r| argmax(&r.probs).0).collect();
    let closed_acc = accuracy(&closed_preds, &known_labels);

    let mut groups: std::collections::BTreeMap<usize, Vec<OpenSetRecord>> = Default::default();
    for r in unknown {
        groups.entry(r.unknown_class.unwrap_or(k)).or_default().push(r.clone());
    }
    let pool: Vec<Vec<OpenSetRecord>> = groups.into_values().collect();
    let open_maf1 = open_maf1_curve(known, &pool, tau, settings.selections, None, settings.seed)?;

    let ks: Vec<f64> = known.iter().map(|r| r.score).collect();
    let us: Vec<f64> = unknown.iter().map(|r| r.score).collect();
    let open_auc = roc_auc(&ks, &us)?;

    let all: Vec<&OpenSetRecord> = known.iter().chain(unknown).collect();
    let mut conf = Vec::with_capacity(all.len());
    let mut ok = Vec::with_capacity(all.len());
    let mut conf2 = Vec::with_capacity(all.len());
    let mut ok2 = Vec::with_capacity(all.len());
    let mut preds = Vec::with_capacity(all.len());
    let mut global = Vec::with_capacity(all.len());
    for r in &all {
        let truth = r.label.index(k);
        let (cls, pmax) = argmax(&r.probs);
        let rejected = r.score > tau;
        let pred = if rejected { k } else { cls };
        conf.push(clamp01(if rejected { r.score } else { pmax }));
        ok.push(pred == truth);
        conf2.push(clamp01(if rejected { r.score } else { 1.0 - r.score }));
        ok2.push(rejected == (truth == k));
        preds.push(pred);
        global.push(match r.label {
            OpenLabel::Known(c) => c,
            OpenLabel::Unknown => k + r.unknown_class.map_or(0, |u| u.saturating_sub(k)),
        });
    }
    let closed_conf: Vec<f64> = known.iter().map(|r| argmax(&r.probs).1).collect();
    let closed_ok: Vec<bool> = closed_preds.iter().zip(&known_labels).map(|(p, y)| p == y).collect();

    let samples: Vec<EucSample> = all
        .iter()
        .zip(&ok)
        .map(|(r, &accurate)| EucSample {
            p: argmax(&r.probs).1,
            u: r.score,
            accurate,
        })
        .collect();
    let avu_tau = match settings.avu_threshold {
        Some(t) => t,
        None => median_uncertainty(&samples)?,
    };
    let avu = avu_utility(&samples, avu_tau)?;

    Ok(OpenSetMetrics {
        threshold: tau,
        closed_acc,
        open_maf1,
        open_auc,
        ece_open: ece(&conf, &ok, settings.ece_bins)?,
        ece_open_binary: ece(&conf2, &ok2, settings.ece_bins)?,
        ece_closed: ece(&closed_conf, &closed_ok, settings.ece_bins)?,
        avu,
        confusion: confusion_and_top_confusions(&preds, &global, k),
    })
}
