//! Dirichlet / subjective-logic algebra.
//!
//! A network emits non-negative evidence `e_k` for each of `K` classes. The
//! evidence parameterizes a Dirichlet with `alpha_k = e_k + 1`, and with a
//! uniform base rate `a_k = 1/K` the resulting multinomial opinion is
//!
//! ```text
//! S = sum_k alpha_k      b_k = e_k / S      u = K / S      p_k = alpha_k / S = b_k + a_k u
//! ```
//!
//! so `u + sum_k b_k = 1` holds by construction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Default symmetric bound applied to logits before `exp`.
pub const DEFAULT_EXP_CLAMP: f64 = 10.0;

/// Maps unconstrained logits to non-negative evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceFunction {
    /// `exp(clamp(x, -clamp, clamp))`
    Exponential { clamp: f64 },
    /// `ln(1 + exp(x))`
    Softplus,
    /// `max(x, 0)`
    RectifiedLinear,
}

impl Default for EvidenceFunction {
    fn default() -> Self {
        EvidenceFunction::Exponential {
            clamp: DEFAULT_EXP_CLAMP,
        }
    }
}

impl EvidenceFunction {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            EvidenceFunction::Exponential { clamp } => x.clamp(-clamp, clamp).exp(),
            EvidenceFunction::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            EvidenceFunction::RectifiedLinear => x.max(0.0),
        }
    }

    /// Derivative of [`apply`](Self::apply); zero where the input is clamped.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            EvidenceFunction::Exponential { clamp } => {
                if x.abs() < clamp {
                    x.exp()
                } else {
                    0.0
                }
            }
            EvidenceFunction::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let z = x.exp();
                    z / (1.0 + z)
                }
            }
            EvidenceFunction::RectifiedLinear => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvidenceFunction::Exponential { .. } => "exp",
            EvidenceFunction::Softplus => "softplus",
            EvidenceFunction::RectifiedLinear => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exp" | "exponential" => Some(EvidenceFunction::default()),
            "softplus" => Some(EvidenceFunction::Softplus),
            "relu" | "rectified_linear" => Some(EvidenceFunction::RectifiedLinear),
            _ => None,
        }
    }
}

/// Per-class non-negative evidence, `K >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector(Vec<f64>);

impl EvidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(
                "evidence",
                format!("need at least 2 classes, got {}", values.len()),
            ));
        }
        ensure_finite("evidence", &values)?;
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(
                "evidence",
                format!("entry {i} is negative ({})", values[i]),
            ));
        }
        Ok(EvidenceVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }
}

pub fn evidence_from_logits(logits: &[f64], kind: EvidenceFunction) -> Result<EvidenceVector> {
    ensure_finite("logits", logits)?;
    EvidenceVector::new(logits.iter().map(|&x| kind.apply(x)).collect())
}

/// A multinomial opinion with uniform base rate, derived from evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub base_rate: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DirichletOpinion {
    pub fn from_evidence(evidence: &EvidenceVector) -> Self {
        let k = evidence.num_classes() as f64;
        let alpha: Vec<f64> = evidence.values().iter().map(|e| e + 1.0).collect();
        let strength: f64 = alpha.iter().sum();
        DirichletOpinion {
            belief: evidence.values().iter().map(|e| e / strength).collect(),
            uncertainty: k / strength,
            base_rate: vec![1.0 / k; alpha.len()],
            probs: alpha.iter().map(|a| a / strength).collect(),
            alpha,
            strength,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn predict(&self) -> Prediction {
        let (class, max_prob) = argmax(&self.probs);
        Prediction {
            class,
            max_prob,
            uncertainty: self.uncertainty,
        }
    }
}

pub fn opinion_from_evidence(evidence: &EvidenceVector) -> DirichletOpinion {
    DirichletOpinion::from_evidence(evidence)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub max_prob: f64,
    pub uncertainty: f64,
}

/// Index and value of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Smallest observed score `tau` such that at least `coverage` of the scores
/// satisfy `score <= tau`, i.e. the `ceil(coverage * n)`-th order statistic.
pub fn threshold_from_train_scores(scores: &[f64], coverage: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("threshold scores"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(
            "coverage",
            format!("must lie in (0, 1], got {coverage}"),
        ));
    }
    ensure_finite("threshold scores", scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against 0.95 * 20 = 19.000000000000004 rounding up to 20.
    let rank = ((coverage * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}
