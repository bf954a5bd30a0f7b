//! Contrastive evidence debiasing.
//!
//! Three branches see the same batch:
//!
//! * `f`: temporal backbone on the original input (the model kept at inference),
//! * `h_shuffled`: same architecture on a temporally shuffled copy,
//! * `h_static`: per-timestep backbone on the original input.
//!
//! The two biased branches can only pick up order-free cues. The middle branch
//! minimizes `EDL + lambda * sum_h HSIC(f, h)` while the biased branches
//! minimize `sum_h [EDL_h - lambda * HSIC(f, h)]`. Each objective treats the
//! other side's features as constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::EvidenceFunction;
use crate::hsic::{hsic_value_and_grad_with, resolve_bandwidth, Bandwidth, KernelParams};
use crate::losses::{edl_loss_batch, LossWeights};
use crate::model::{
    evidence_from_logit_batch, evidence_grad_to_logits, evidential_terms, Architecture, Branch,
    Classifier, OutputKind, StepRecord,
};
use crate::nn::{apply_permutations, draw_permutations, Parameter, ParamSource, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    /// Both objectives from one forward pass, one optimizer step.
    Joint,
    /// `period` steps on the debiasing side, then `period` on the biased side.
    Alternating { period: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CedBranches {
    pub f: Branch,
    pub h_shuffled: Branch,
    pub h_static: Branch,
    pub evidence: EvidenceFunction,
}

/// Everything one forward pass through all three branches produces.
#[derive(Debug, Clone, PartialEq)]
pub struct CedForward {
    pub f: Tensor,
    pub h_shuffled: Tensor,
    pub h_static: Tensor,
    pub logits: [Tensor; 3],
    pub evidence: [Tensor; 3],
}

/// Kernel settings for the middle feature and each biased feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelChoice {
    pub f: KernelParams,
    pub h: [KernelParams; 2],
}

impl KernelChoice {
    pub fn uniform(params: KernelParams) -> Self {
        KernelChoice {
            f: params,
            h: [params; 2],
        }
    }

    /// Freezes the bandwidths the given forward pass would use.
    pub fn pinned(fwd: &CedForward, base: &KernelParams) -> Result<Self> {
        let pin = |x: &Tensor| -> Result<KernelParams> {
            Ok(KernelParams {
                bandwidth: Bandwidth::Fixed(resolve_bandwidth(x, base)?),
                center_features: base.center_features,
            })
        };
        Ok(KernelChoice {
            f: pin(&fwd.f)?,
            h: [pin(&fwd.h_shuffled)?, pin(&fwd.h_static)?],
        })
    }
}

fn hsic_pair(
    f: &Tensor,
    h: &Tensor,
    kf: &KernelParams,
    kh: &KernelParams,
) -> Result<crate::hsic::HsicGrad> {
    hsic_value_and_grad_with(f, kf, h, kh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasTerms {
    pub loss: f64,
    pub edl: f64,
    pub hsic: [f64; 2],
    /// `d loss / d e` for the middle branch.
    pub grad_evidence: Tensor,
    /// `d loss / d f` through the HSIC terms.
    pub grad_features: Tensor,
}

/// `EDL(y, e) + lambda * [HSIC(f, h_shuffled) + HSIC(f, h_static)]`, with
/// gradients for the middle branch only.
pub fn debias_objective(
    labels: &[usize],
    evidence: &Tensor,
    f: &Tensor,
    h: [&Tensor; 2],
    lambda: f64,
    kernels: &KernelChoice,
) -> Result<DebiasTerms> {
    let (edl, grad_evidence) = edl_loss_batch(labels, evidence)?;
    let mut grad_features = Tensor::zeros(f.shape());
    let mut hsic = [0.0; 2];
    for (i, hi) in h.iter().enumerate() {
        let r = hsic_pair(f, hi, &kernels.f, &kernels.h[i])?;
        hsic[i] = r.value;
        if lambda != 0.0 {
            for (g, d) in grad_features.data_mut().iter_mut().zip(r.grad_x.data()) {
                *g += lambda * d;
            }
        }
    }
    Ok(DebiasTerms {
        loss: edl + lambda * (hsic[0] + hsic[1]),
        edl,
        hsic,
        grad_evidence,
        grad_features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTerms {
    pub loss: f64,
    pub edl: [f64; 2],
    pub hsic: [f64; 2],
    pub grad_evidence: [Tensor; 2],
    pub grad_features: [Tensor; 2],
}

/// `sum_h [EDL(y, e_h) - lambda * HSIC(f, h)]`, with gradients for the biased
/// branches only.
pub fn bias_objective(
    labels: &[usize],
    evidence: [&Tensor; 2],
    f: &Tensor,
    h: [&Tensor; 2],
    lambda: f64,
    kernels: &KernelChoice,
) -> Result<BiasTerms> {
    let mut loss = 0.0;
    let mut edl = [0.0; 2];
    let mut hsic = [0.0; 2];
    let mut grad_evidence = [Tensor::zeros(&[0]), Tensor::zeros(&[0])];
    let mut grad_features = [Tensor::zeros(&[0]), Tensor::zeros(&[0])];
    for i in 0..2 {
        let (value, ge) = edl_loss_batch(labels, evidence[i])?;
        let r = hsic_pair(f, h[i], &kernels.f, &kernels.h[i])?;
        let mut gf = r.grad_y;
        gf.scale(-lambda);
        edl[i] = value;
        hsic[i] = r.value;
        loss += value - lambda * r.value;
        grad_evidence[i] = ge;
        grad_features[i] = gf;
    }
    Ok(BiasTerms {
        loss,
        edl,
        hsic,
        grad_evidence,
        grad_features,
    })
}

/// Options for one CED training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CedStep {
    pub mode: TrainingMode,
    pub weights: LossWeights,
    /// `Some(lambda_t)` when the calibration term is on.
    pub euc_lambda: Option<f64>,
    pub kernel: KernelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Debias,
    Bias,
    Both,
}

impl CedBranches {
    /// Builds the middle branch first so its initialization matches a
    /// [`Classifier`] built from the same generator.
    pub fn new(
        arch: &Architecture,
        in_channels: usize,
        num_classes: usize,
        evidence: EvidenceFunction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let head = arch.head(num_classes);
        let f = Branch::build(&arch.temporal_backbone(), &head, in_channels, "f", rng)?;
        let h_shuffled =
            Branch::build(&arch.temporal_backbone(), &head, in_channels, "h_shuffled", rng)?;
        let h_static = Branch::build(&arch.static_backbone(), &head, in_channels, "h_static", rng)?;
        Ok(CedBranches {
            f,
            h_shuffled,
            h_static,
            evidence,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.f.num_classes()
    }

    pub fn ced_forward(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<CedForward> {
        x.expect_rank("ced_forward", 3)?;
        if x.shape()[0] < 2 {
            return Err(Error::invalid(
                "ced_forward",
                format!("batch size must be >= 2, got {}", x.shape()[0]),
            ));
        }
        let perms = draw_permutations(x, rng)?;
        let shuffled = apply_permutations(x, &perms)?;
        let (f, lf) = self.f.forward(x)?;
        let (hs, ls) = self.h_shuffled.forward(&shuffled)?;
        let (ht, lt) = self.h_static.forward(x)?;
        let evidence = [
            evidence_from_logit_batch(&lf, self.evidence),
            evidence_from_logit_batch(&ls, self.evidence),
            evidence_from_logit_batch(&lt, self.evidence),
        ];
        Ok(CedForward {
            f,
            h_shuffled: hs,
            h_static: ht,
            logits: [lf, ls, lt],
            evidence,
        })
    }

    /// Backpropagates middle-branch upstream gradients.
    pub fn backward_debias(
        &mut self,
        fwd: &CedForward,
        grad_evidence: &Tensor,
        grad_features: Option<&Tensor>,
    ) -> Result<()> {
        let gl = evidence_grad_to_logits(grad_evidence, &fwd.logits[0], self.evidence);
        self.f.backward(&gl, grad_features)
    }

    /// Backpropagates biased-branch upstream gradients.
    pub fn backward_bias(
        &mut self,
        fwd: &CedForward,
        grad_evidence: &[Tensor; 2],
        grad_features: &[Tensor; 2],
    ) -> Result<()> {
        let gl = evidence_grad_to_logits(&grad_evidence[0], &fwd.logits[1], self.evidence);
        self.h_shuffled.backward(&gl, Some(&grad_features[0]))?;
        let gl = evidence_grad_to_logits(&grad_evidence[1], &fwd.logits[2], self.evidence);
        self.h_static.backward(&gl, Some(&grad_features[1]))
    }

    pub fn zero_grad(&mut self) {
        self.f.zero_grad();
        self.h_shuffled.zero_grad();
        self.h_static.zero_grad();
    }

    fn biased_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.h_shuffled.params_mut();
        p.extend(self.h_static.params_mut());
        p
    }

    fn biased_grads_are_zero(&self) -> bool {
        self.h_shuffled
            .params()
            .into_iter()
            .chain(self.h_static.params())
            .all(|p| p.grad.data().iter().all(|&g| g == 0.0))
    }

    fn f_grads(&self) -> Vec<Vec<f64>> {
        self.f.params().iter().map(|p| p.grad.data().to_vec()).collect()
    }

    /// One training step. The total objective is
    /// `EDL_f + w_euc * EUC_f + w_ced * L_CED` where `L_CED` is the HSIC part
    /// of the debiasing objective plus the whole biased-branch objective; the
    /// middle-branch EDL term is counted once.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opts: &CedStep,
        sgd: &Sgd,
        step: usize,
        rng: &mut impl Rng,
    ) -> Result<StepRecord> {
        let side = match opts.mode {
            TrainingMode::Joint => Side::Both,
            TrainingMode::Alternating { period } => {
                if (step / period.max(1)).is_multiple_of(2) {
                    Side::Debias
                } else {
                    Side::Bias
                }
            }
        };
        let w = opts.weights;
        let lambda = w.lambda_hsic;
        self.zero_grad();
        let fwd = self.ced_forward(x, rng)?;
        let kernels = KernelChoice::uniform(opts.kernel);

        let euc = opts.euc_lambda.map(|l| (w.w_euc, l));
        let (edl, euc_value, grad_e) = evidential_terms(labels, &fwd.evidence[0], euc)?;
        let debias = debias_objective(
            labels,
            &fwd.evidence[0],
            &fwd.f,
            [&fwd.h_shuffled, &fwd.h_static],
            lambda,
            &kernels,
        )?;
        let bias = bias_objective(
            labels,
            [&fwd.evidence[1], &fwd.evidence[2]],
            &fwd.f,
            [&fwd.h_shuffled, &fwd.h_static],
            lambda,
            &kernels,
        )?;
        let ced = lambda * (debias.hsic[0] + debias.hsic[1]) + bias.loss;
        let record = StepRecord {
            edl,
            euc: euc_value,
            ced,
            hsic_shuffled: debias.hsic[0],
            hsic_static: debias.hsic[1],
            total: edl + w.w_euc * euc_value + w.w_ced * ced,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{record:?}"),
            });
        }

        if side != Side::Bias {
            let grad_f = if lambda != 0.0 && w.w_ced != 0.0 {
                let mut g = debias.grad_features.clone();
                g.scale(w.w_ced);
                Some(g)
            } else {
                None
            };
            self.backward_debias(&fwd, &grad_e, grad_f.as_ref())?;
            debug_assert!(self.biased_grads_are_zero(), "debias step leaked into biased branches");
        }
        if side != Side::Debias {
            let before = cfg!(debug_assertions).then(|| self.f_grads());
            let mut ge = bias.grad_evidence.clone();
            let mut gf = bias.grad_features.clone();
            ge.iter_mut().chain(gf.iter_mut()).for_each(|t| t.scale(w.w_ced));
            self.backward_bias(&fwd, &ge, &gf)?;
            if let Some(before) = before {
                debug_assert!(before == self.f_grads(), "bias step leaked into middle branch");
            }
        }

        match side {
            Side::Both => sgd.step(&mut self.params_mut())?,
            Side::Debias => sgd.step(&mut self.f.params_mut())?,
            Side::Bias => sgd.step(&mut self.biased_params_mut())?,
        }
        Ok(record)
    }

    /// Drops the biased branches, keeping the middle backbone and its head.
    pub fn strip_for_inference(&self) -> Classifier {
        Classifier {
            branch: self.f.clone(),
            output: OutputKind::Evidential {
                evidence: self.evidence,
            },
        }
    }
}

impl ParamSource for CedBranches {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.f.params_mut();
        p.extend(self.h_shuffled.params_mut());
        p.extend(self.h_static.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_arch() -> Architecture {
        Architecture {
            hidden_channels: 4,
            kernel_width: 3,
            conv_layers: 1,
        }
    }

    fn input(b: usize, c: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_vec(
            &[b, c, t],
            (0..b * c * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn branches() -> CedBranches {
        CedBranches::new(&small_arch(), 2, 3, EvidenceFunction::default(), &mut seeded(1)).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let mut b = CedBranches::new(
            &Architecture {
                hidden_channels: 16,
                ..small_arch()
            },
            2,
            3,
            EvidenceFunction::default(),
            &mut seeded(1),
        )
        .unwrap();
        let fwd = b.ced_forward(&input(4, 2, 6, 2), &mut seeded(3)).unwrap();
        for t in [&fwd.f, &fwd.h_shuffled, &fwd.h_static] {
            assert_eq!(t.shape(), &[4, 16]);
        }
        assert_eq!(fwd.evidence[2].shape(), &[4, 3]);
    }

    #[test]
    fn rejects_single_sample_batch() {
        assert!(branches().ced_forward(&input(1, 2, 6, 2), &mut seeded(3)).is_err());
    }

    #[test]
    fn constant_in_time_input_makes_shuffle_invisible() {
        let mut b = branches();
        b.h_shuffled = b.f.clone();
        let mut x = Tensor::zeros(&[3, 2, 6]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i / 6) as f64 * 0.3 - 0.5;
        }
        let fwd = b.ced_forward(&x, &mut seeded(4)).unwrap();
        assert_eq!(fwd.f, fwd.h_shuffled);
    }

    #[test]
    fn lambda_zero_reduces_to_edl() {
        let mut b = branches();
        let fwd = b.ced_forward(&input(4, 2, 6, 5), &mut seeded(6)).unwrap();
        let labels = [0, 1, 2, 0];
        let k = KernelChoice::uniform(KernelParams::default());
        let d = debias_objective(&labels, &fwd.evidence[0], &fwd.f, [&fwd.h_shuffled, &fwd.h_static], 0.0, &k).unwrap();
        assert_eq!(d.loss, edl_loss_batch(&labels, &fwd.evidence[0]).unwrap().0);
        assert!(d.grad_features.data().iter().all(|&g| g == 0.0));
        let bo = bias_objective(
            &labels,
            [&fwd.evidence[1], &fwd.evidence[2]],
            &fwd.f,
            [&fwd.h_shuffled, &fwd.h_static],
            0.0,
            &k,
        )
        .unwrap();
        let expected = edl_loss_batch(&labels, &fwd.evidence[1]).unwrap().0
            + edl_loss_batch(&labels, &fwd.evidence[2]).unwrap().0;
        assert_eq!(bo.loss, expected);
    }

    #[test]
    fn constant_features_have_no_hsic() {
        let labels = [0, 1, 2, 0];
        let e = Tensor::from_vec(&[4, 3], vec![1.0; 12]).unwrap();
        let f = Tensor::from_vec(&[4, 2], vec![0.5; 8]).unwrap();
        let h = input(4, 2, 1, 9);
        let h = Tensor::from_vec(&[4, 2], h.into_data()).unwrap();
        let k = KernelChoice::uniform(KernelParams::default());
        let d = debias_objective(&labels, &e, &f, [&h, &h], 1.0, &k).unwrap();
        assert!((d.loss - d.edl).abs() < 1e-12);
        let bo = bias_objective(&labels, [&e, &e], &f, [&h, &h], 1.0, &k).unwrap();
        assert!((bo.loss - bo.edl[0] - bo.edl[1]).abs() < 1e-12);
    }

    #[test]
    fn alternating_freezes_the_idle_side() {
        let mut b = branches();
        let x = input(4, 2, 6, 7);
        let labels = [0, 1, 2, 1];
        let opts = CedStep {
            mode: TrainingMode::Alternating { period: 1 },
            weights: LossWeights::default(),
            euc_lambda: Some(0.1),
            kernel: KernelParams::default(),
        };
        let sgd = Sgd::default();
        let h_before = (b.h_shuffled.clone(), b.h_static.clone());
        b.train_step(&x, &labels, &opts, &sgd, 0, &mut seeded(1)).unwrap();
        assert_eq!(b.h_shuffled.params(), h_before.0.params());
        assert_eq!(b.h_static.params(), h_before.1.params());
        let f_before = b.f.clone();
        b.train_step(&x, &labels, &opts, &sgd, 1, &mut seeded(2)).unwrap();
        assert_eq!(b.f.params(), f_before.params());
        assert_ne!(b.h_static.params(), h_before.1.params());
    }

    #[test]
    fn strip_keeps_middle_predictions() {
        let mut b = branches();
        let x = input(4, 2, 6, 8);
        let mut stripped = b.strip_for_inference();
        let fwd = b.ced_forward(&x, &mut seeded(0)).unwrap();
        let (_, logits) = stripped.branch.forward(&x).unwrap();
        assert_eq!(logits, fwd.logits[0]);
        assert_eq!(stripped.strip_for_inference(), stripped);
    }
}
