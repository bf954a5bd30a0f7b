//! Backbone + head networks and the inference-time classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{argmax, EvidenceFunction};
use crate::losses::{edl_loss_batch, euc_loss_from_evidence};
use crate::nn::{LayerSpec, Parameter, ParamSource, Sequential, Sgd};
use crate::tensor::Tensor;

/// Layer sizes shared by all branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_channels: usize,
    pub kernel_width: usize,
    pub conv_layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden_channels: 16,
            kernel_width: 5,
            conv_layers: 2,
        }
    }
}

impl Architecture {
    /// Convolutions spanning time, then mean pooling: sees temporal order.
    pub fn temporal_backbone(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for _ in 0..self.conv_layers {
            specs.push(LayerSpec::TemporalConv {
                out_channels: self.hidden_channels,
                width: self.kernel_width,
            });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::TemporalMeanPool);
        specs
    }

    /// Per-timestep convolutions, then mean pooling: blind to temporal order.
    pub fn static_backbone(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for _ in 0..self.conv_layers {
            specs.push(LayerSpec::PointwiseConv {
                out_channels: self.hidden_channels,
            });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::TemporalMeanPool);
        specs
    }

    pub fn head(&self, num_classes: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::Dense {
            out_dim: num_classes,
        }]
    }

    /// Shortest sequence the temporal backbone accepts.
    pub fn min_timesteps(&self) -> usize {
        self.conv_layers * (self.kernel_width - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 {
            return Err(Error::invalid("hidden_channels", "must be positive"));
        }
        if self.kernel_width < 2 {
            return Err(Error::invalid("kernel_width", "must be >= 2"));
        }
        if self.conv_layers == 0 {
            return Err(Error::invalid("conv_layers", "must be positive"));
        }
        Ok(())
    }
}

/// Feature extractor plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub backbone: Sequential,
    pub head: Sequential,
}

impl Branch {
    pub fn build(
        backbone: &[LayerSpec],
        head: &[LayerSpec],
        in_channels: usize,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = Sequential::build(backbone, in_channels, &format!("{prefix}.backbone"), rng)?;
        let head = Sequential::build(head, backbone.out_features(), &format!("{prefix}.head"), rng)?;
        Ok(Branch { backbone, head })
    }

    /// Returns `(pooled features B x d, logits B x K)`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let features = self.backbone.forward(x)?;
        let logits = self.head.forward(&features)?;
        Ok((features, logits))
    }

    /// Backpropagates a logit gradient plus an optional direct feature gradient.
    pub fn backward(&mut self, grad_logits: &Tensor, grad_features: Option<&Tensor>) -> Result<()> {
        let mut g = self.head.backward(grad_logits)?;
        if let Some(extra) = grad_features {
            g.add_assign(extra)?;
        }
        self.backbone.backward(&g)?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.in_features()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.head.zero_grad();
    }
}

impl ParamSource for Branch {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Branch::params_mut(self)
    }
}

pub fn evidence_from_logit_batch(logits: &Tensor, f: EvidenceFunction) -> Tensor {
    let mut e = logits.clone();
    e.data_mut().iter_mut().for_each(|v| *v = f.apply(*v));
    e
}

/// Chain rule through the elementwise evidence function.
pub fn evidence_grad_to_logits(grad_e: &Tensor, logits: &Tensor, f: EvidenceFunction) -> Tensor {
    let mut g = grad_e.clone();
    for (gv, x) in g.data_mut().iter_mut().zip(logits.data()) {
        *gv *= f.derivative(*x);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputKind {
    Evidential { evidence: EvidenceFunction },
    /// Softmax cross-entropy baseline scored by `1 - max p`.
    Softmax,
}

/// Per-sample inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub probs: Vec<f64>,
    /// Higher means "more likely unknown".
    pub score: f64,
    pub class: usize,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-step loss terms reported by every trainer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub edl: f64,
    pub euc: f64,
    pub ced: f64,
    pub hsic_shuffled: f64,
    pub hsic_static: f64,
    pub total: f64,
}

/// Loss and evidence gradient of the middle-branch classification terms:
/// batch-summed EDL plus (optionally) weighted EUC.
pub(crate) fn evidential_terms(
    labels: &[usize],
    evidence: &Tensor,
    w_euc: Option<(f64, f64)>,
) -> Result<(f64, f64, Tensor)> {
    let (edl, mut grad) = edl_loss_batch(labels, evidence)?;
    let mut euc = 0.0;
    if let Some((weight, lambda_t)) = w_euc {
        let (value, g) = euc_loss_from_evidence(labels, evidence, lambda_t)?;
        euc = value;
        for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
            *a += weight * b;
        }
    }
    Ok((edl, euc, grad))
}

/// A single-branch model: what remains at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub branch: Branch,
    pub output: OutputKind,
}

impl ParamSource for Classifier {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.branch.params_mut()
    }
}

impl Classifier {
    pub fn new(
        arch: &Architecture,
        in_channels: usize,
        num_classes: usize,
        output: OutputKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        arch.validate()?;
        Ok(Classifier {
            branch: Branch::build(
                &arch.temporal_backbone(),
                &arch.head(num_classes),
                in_channels,
                "f",
                rng,
            )?,
            output,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.branch.num_classes()
    }

    /// Already single-branch; returns an identical copy.
    pub fn strip_for_inference(&self) -> Classifier {
        self.clone()
    }

    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<Scored>> {
        let (_, logits) = self.branch.forward(x)?;
        let k = logits.shape()[1];
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = logits.row(i);
                let (probs, score) = match self.output {
                    OutputKind::Evidential { evidence } => {
                        let alpha: Vec<f64> = row.iter().map(|&l| evidence.apply(l) + 1.0).collect();
                        let s: f64 = alpha.iter().sum();
                        (alpha.iter().map(|a| a / s).collect::<Vec<_>>(), k as f64 / s)
                    }
                    OutputKind::Softmax => {
                        let p = softmax(row);
                        let max = argmax(&p).1;
                        (p, 1.0 - max)
                    }
                };
                let class = argmax(&probs).0;
                Scored { probs, score, class }
            })
            .collect())
    }

    /// One optimizer step on the classification objective.
    /// `euc` carries `(w_euc, lambda_t)` when calibration is on.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        euc: Option<(f64, f64)>,
        sgd: &Sgd,
    ) -> Result<StepRecord> {
        self.branch.zero_grad();
        let (_, logits) = self.branch.forward(x)?;
        let record = match self.output {
            OutputKind::Evidential { evidence } => {
                let e = evidence_from_logit_batch(&logits, evidence);
                let (edl, euc_value, grad_e) = evidential_terms(labels, &e, euc)?;
                let grad_logits = evidence_grad_to_logits(&grad_e, &logits, evidence);
                self.branch.backward(&grad_logits, None)?;
                let w_euc = euc.map_or(0.0, |(w, _)| w);
                StepRecord {
                    edl,
                    euc: euc_value,
                    total: edl + w_euc * euc_value,
                    ..StepRecord::default()
                }
            }
            OutputKind::Softmax => {
                let (ce, grad_logits) = cross_entropy(labels, &logits)?;
                self.branch.backward(&grad_logits, None)?;
                StepRecord {
                    edl: ce,
                    total: ce,
                    ..StepRecord::default()
                }
            }
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                detail: format!("{record:?}"),
            });
        }
        sgd.step(&mut self.branch.params_mut())?;
        Ok(record)
    }
}

/// Softmax cross-entropy summed over the batch, and its logit gradient.
pub fn cross_entropy(labels: &[usize], logits: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_rank("cross_entropy", 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy labels",
            expected: vec![b],
            actual: vec![labels.len()],
        });
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(i));
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(i);
        for j in 0..k {
            g[j] = p[j] - if j == y { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, grad))
}
