//! Evidential losses with analytic gradients.
//!
//! * [`edl_loss`]: Dirichlet-categorical negative log marginal likelihood,
//!   `sum_k y_k (ln S - ln alpha_k)`.
//! * [`euc_loss`]: annealed calibration penalty on accurate-but-uncertain and
//!   inaccurate-but-certain predictions.
//! * [`avu_utility`]: accuracy-versus-uncertainty diagnostic (not differentiated).
//! * [`total_loss`]: weighted combination of the three training terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{argmax, EvidenceVector};
use crate::tensor::Tensor;

/// Bounds applied to `p` and `u` before taking logarithms in [`euc_loss`].
pub const EUC_CLAMP: f64 = 1e-7;

/// Returns the loss and `d loss / d e`.
pub fn edl_loss(y: &[f64], evidence: &EvidenceVector) -> (f64, Vec<f64>) {
    let e = evidence.values();
    debug_assert_eq!(y.len(), e.len());
    let strength: f64 = e.iter().map(|v| v + 1.0).sum();
    let ln_s = strength.ln();
    let y_sum: f64 = y.iter().sum();
    let mut loss = 0.0;
    for (yk, ek) in y.iter().zip(e) {
        if *yk != 0.0 {
            loss += yk * (ln_s - (ek + 1.0).ln());
        }
    }
    let grad = y
        .iter()
        .zip(e)
        .map(|(yk, ek)| y_sum / strength - yk / (ek + 1.0))
        .collect();
    (loss, grad)
}

/// EDL loss summed over a `B x K` evidence tensor; gradient has the same shape.
pub fn edl_loss_batch(labels: &[usize], evidence: &Tensor) -> Result<(f64, Tensor)> {
    let (b, k) = batch_dims(labels, evidence)?;
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = evidence.row(i);
        let strength: f64 = row.iter().map(|v| v + 1.0).sum();
        total += strength.ln() - (row[label] + 1.0).ln();
        let g = grad.row_mut(i);
        g.fill(1.0 / strength);
        g[label] -= 1.0 / (row[label] + 1.0);
    }
    Ok((total, grad))
}

fn batch_dims(labels: &[usize], evidence: &Tensor) -> Result<(usize, usize)> {
    evidence.expect_rank("evidence batch", 2)?;
    let (b, k) = (evidence.shape()[0], evidence.shape()[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "labels vs evidence batch",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "labels",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    Ok((b, k))
}

pub fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    y[label] = 1.0;
    y
}

/// Exponential ramp from `lambda0` at epoch 0 to 1 at epoch `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    pub lambda0: f64,
    pub total_epochs: usize,
}

impl AnnealingSchedule {
    pub fn new(lambda0: f64, total_epochs: usize) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0 < 1.0) {
            return Err(Error::invalid(
                "lambda0",
                format!("must lie in (0, 1), got {lambda0}"),
            ));
        }
        if total_epochs == 0 {
            return Err(Error::invalid("total_epochs", "must be positive"));
        }
        Ok(AnnealingSchedule {
            lambda0,
            total_epochs,
        })
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        annealing_lambda(epoch, self)
    }
}

pub fn annealing_lambda(epoch: usize, sched: &AnnealingSchedule) -> f64 {
    if epoch > sched.total_epochs {
        log::warn!(
            "annealing epoch {epoch} exceeds total {}; using 1.0",
            sched.total_epochs
        );
        return 1.0;
    }
    let rate = -sched.lambda0.ln() / sched.total_epochs as f64;
    sched.lambda0 * (rate * epoch as f64).exp()
}

/// One sample as seen by the calibration loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EucSample {
    /// Maximum class probability.
    pub p: f64,
    pub u: f64,
    pub accurate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EucLoss {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_u: Vec<f64>,
}

/// `-lambda_t * mean_AC[p ln(1-u)] - (1-lambda_t) * mean_IN[(1-p) ln u]`
/// where the means run over accurate and inaccurate samples respectively.
pub fn euc_loss(samples: &[EucSample], lambda_t: f64) -> EucLoss {
    let n_acc = samples.iter().filter(|s| s.accurate).count();
    let n_inacc = samples.len() - n_acc;
    let lo = EUC_CLAMP;
    let hi = 1.0 - EUC_CLAMP;
    let mut value = 0.0;
    let mut grad_p = vec![0.0; samples.len()];
    let mut grad_u = vec![0.0; samples.len()];
    for (i, s) in samples.iter().enumerate() {
        let p = s.p.clamp(lo, hi);
        let u = s.u.clamp(lo, hi);
        let dp = if s.p > lo && s.p < hi { 1.0 } else { 0.0 };
        let du = if s.u > lo && s.u < hi { 1.0 } else { 0.0 };
        if s.accurate {
            let w = lambda_t / n_acc as f64;
            let log_cert = (1.0 - u).ln();
            value -= w * p * log_cert;
            grad_p[i] = -w * log_cert * dp;
            grad_u[i] = w * p / (1.0 - u) * du;
        } else {
            let w = (1.0 - lambda_t) / n_inacc as f64;
            let log_unc = u.ln();
            value -= w * (1.0 - p) * log_unc;
            grad_p[i] = w * log_unc * dp;
            grad_u[i] = -w * (1.0 - p) / u * du;
        }
    }
    EucLoss {
        value,
        grad_p,
        grad_u,
    }
}

/// Per-sample calibration inputs from a `B x K` evidence batch.
pub fn euc_samples(labels: &[usize], evidence: &Tensor) -> Result<Vec<EucSample>> {
    let (b, k) = batch_dims(labels, evidence)?;
    Ok((0..b)
        .map(|i| {
            let row = evidence.row(i);
            let strength: f64 = row.iter().map(|v| v + 1.0).sum();
            let (class, e_max) = argmax(row);
            EucSample {
                p: (e_max + 1.0) / strength,
                u: k as f64 / strength,
                accurate: class == labels[i],
            }
        })
        .collect())
}

/// [`euc_loss`] with the gradient pushed back onto the evidence through both
/// `p = alpha_max / S` and `u = K / S`.
pub fn euc_loss_from_evidence(
    labels: &[usize],
    evidence: &Tensor,
    lambda_t: f64,
) -> Result<(f64, Tensor)> {
    let samples = euc_samples(labels, evidence)?;
    let loss = euc_loss(&samples, lambda_t);
    let (b, k) = (evidence.shape()[0], evidence.shape()[1]);
    let mut grad = Tensor::zeros(&[b, k]);
    for i in 0..b {
        let row = evidence.row(i);
        let strength: f64 = row.iter().map(|v| v + 1.0).sum();
        let (class, e_max) = argmax(row);
        let alpha_max = e_max + 1.0;
        let s2 = strength * strength;
        let (gp, gu) = (loss.grad_p[i], loss.grad_u[i]);
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let dp = if j == class {
                (strength - alpha_max) / s2
            } else {
                -alpha_max / s2
            };
            let du = -(k as f64) / s2;
            *gj = gp * dp + gu * du;
        }
    }
    Ok((loss.value, grad))
}

/// `(n_AC + n_IU) / n`, where a sample is "certain" when `u < threshold`.
pub fn avu_utility(samples: &[EucSample], u_threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("AvU batch"));
    }
    let good = samples
        .iter()
        .filter(|s| {
            let certain = s.u < u_threshold;
            (s.accurate && certain) || (!s.accurate && !certain)
        })
        .count();
    Ok(good as f64 / samples.len() as f64)
}

/// Median uncertainty; the default AvU threshold.
pub fn median_uncertainty(samples: &[EucSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("AvU batch"));
    }
    let mut u: Vec<f64> = samples.iter().map(|s| s.u).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len();
    Ok(if n % 2 == 1 {
        u[n / 2]
    } else {
        0.5 * (u[n / 2 - 1] + u[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_euc: f64,
    pub w_ced: f64,
    pub lambda_hsic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_euc: 1.0,
            w_ced: 0.1,
            lambda_hsic: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_euc", self.w_euc),
            ("w_ced", self.w_ced),
            ("lambda_hsic", self.lambda_hsic),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn total_loss(edl: f64, euc: f64, ced: f64, w: &LossWeights) -> Result<f64> {
    for (what, v) in [("edl", edl), ("euc", euc), ("ced", ced)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                detail: format!("{what} component is {v}"),
            });
        }
    }
    Ok(edl + w.w_euc * euc + w.w_ced * ced)
}
