//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each check draws random instances, wraps the differentiated inputs as
//! [`Parameter`]s and compares against central differences. Kernel
//! bandwidths are pinned per instance so the loss is a smooth function of
//! the inputs being perturbed.

use rand::Rng;
use serde::Serialize;

use crate::debias::{bias_objective, debias_objective, CedBranches, KernelChoice};
use crate::error::{Error, Result};
use crate::evidential::{EvidenceFunction, EvidenceVector};
use crate::hsic::{hsic_value_and_grad_with, resolve_bandwidth, KernelParams};
use crate::losses::{edl_loss, euc_loss_from_evidence};
use crate::model::{evidence_from_logit_batch, evidence_grad_to_logits, evidential_terms, Architecture, Classifier, OutputKind};
use crate::nn::{gradcheck, GradcheckOptions, Layer, ParamSource, Parameter, Sequential};
use crate::rng::{derive_seed, seeded, RunRng};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub eps: f64,
    /// Replaces the evidence-function derivative by 1 in the composed model,
    /// a realistic backprop bug the suite must catch.
    pub inject_bug: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 20,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            eps: 1e-5,
            inject_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst error.
    pub worst: String,
    /// `instance:param` labels at or above tolerance.
    pub failing: Vec<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn uniform_tensor(rng: &mut RunRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape and length agree")
}

fn labels(rng: &mut RunRng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..k)).collect()
}

fn pinned(x: &Tensor) -> Result<KernelParams> {
    Ok(KernelParams::fixed(resolve_bandwidth(x, &KernelParams::default())?))
}

/// Moves every parameter off its initialization so that zero biases do not
/// leave exactly tied logits.
fn jitter<M: ParamSource>(model: &mut M, rng: &mut RunRng) {
    for p in model.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
}

/// ReLU inputs closer to zero than this many finite-difference steps force a redraw.
const KINK_MARGIN_STEPS: f64 = 100.0;
const MAX_REDRAWS: usize = 200;

/// Smallest `|input|` seen by any ReLU during the last forward pass.
fn relu_margin(seq: &Sequential) -> f64 {
    seq.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Relu { cache: Some(x) } => Some(x),
            _ => None,
        })
        .flat_map(|x| x.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Jitters copies of `base` until `margin` reports every ReLU input clear of
/// the kink, so central differences never straddle it.
fn jitter_off_kinks<M: ParamSource + Clone>(
    base: &M,
    rng: &mut RunRng,
    eps: f64,
    mut margin: impl FnMut(&mut M) -> Result<f64>,
) -> Result<M> {
    for _ in 0..MAX_REDRAWS {
        let mut model = base.clone();
        jitter(&mut model, rng);
        if margin(&mut model)? >= KINK_MARGIN_STEPS * eps {
            return Ok(model);
        }
    }
    Err(Error::InvalidArgument {
        name: "eps",
        message: format!("no draw kept ReLU inputs {KINK_MARGIN_STEPS} steps of {eps:e} from zero"),
    })
}

fn add_grad(p: &mut Parameter, g: &Tensor) {
    p.grad.add_assign(g).expect("gradient shape matches parameter");
}

struct Check<'a> {
    name: &'a str,
    opts: &'a SuiteOptions,
    result: CheckResult,
}

impl<'a> Check<'a> {
    fn new(name: &'a str, opts: &'a SuiteOptions) -> Self {
        Check {
            name,
            opts,
            result: CheckResult {
                name: name.to_string(),
                instances: 0,
                max_rel_err: 0.0,
                worst: String::new(),
                failing: Vec::new(),
            },
        }
    }

    fn rng(&self, instance: usize) -> RunRng {
        let tag = self.name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        seeded(derive_seed(derive_seed(self.opts.seed, tag), instance as u64))
    }

    fn record<M: ParamSource>(
        &mut self,
        instance: usize,
        model: &mut M,
        eval: impl FnMut(&mut M, bool) -> Result<f64>,
    ) -> Result<()> {
        let report = gradcheck(
            model,
            eval,
            GradcheckOptions {
                eps: self.opts.eps,
                seed: instance as u64,
                ..GradcheckOptions::default()
            },
        )?;
        for p in &report.params {
            if p.max_rel_err > self.result.max_rel_err || self.result.worst.is_empty() {
                self.result.max_rel_err = self.result.max_rel_err.max(p.max_rel_err);
                self.result.worst = p.name.clone();
            }
            if p.max_rel_err >= self.opts.tolerance {
                self.result
                    .failing
                    .push(format!("{instance}:{} ({:.3e}, abs {:.3e})", p.name, p.max_rel_err, p.max_abs_err));
            }
        }
        self.result.instances += 1;
        Ok(())
    }
}

fn check_edl(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut check = Check::new("edl_loss", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let k = rng.random_range(2..8);
        let y = crate::losses::one_hot(rng.random_range(0..k), k);
        let mut params = vec![Parameter::new("evidence", uniform_tensor(&mut rng, &[k], 0.05, 6.0))];
        check.record(i, &mut params, |p, backprop| {
            let e = EvidenceVector::new(p[0].value.data().to_vec())?;
            let (loss, grad) = edl_loss(&y, &e);
            if backprop {
                add_grad(&mut p[0], &Tensor::from_vec(&[k], grad)?);
            }
            Ok(loss)
        })?;
    }
    Ok(check.result)
}

fn check_euc(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut check = Check::new("euc_loss", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let (b, k) = (rng.random_range(3..10), rng.random_range(2..6));
        let y = labels(&mut rng, b, k);
        let lambda_t = rng.random_range(0.01..1.0);
        let mut params = vec![Parameter::new("evidence", uniform_tensor(&mut rng, &[b, k], 0.05, 6.0))];
        check.record(i, &mut params, |p, backprop| {
            let (loss, grad) = euc_loss_from_evidence(&y, &p[0].value, lambda_t)?;
            if backprop {
                add_grad(&mut p[0], &grad);
            }
            Ok(loss)
        })?;
    }
    Ok(check.result)
}

fn check_hsic(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut check = Check::new("hsic_value_and_grad", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let n = rng.random_range(3..12);
        let (dx, dy) = (rng.random_range(1..5), rng.random_range(1..5));
        let x = uniform_tensor(&mut rng, &[n, dx], -1.0, 1.0);
        let mut y = uniform_tensor(&mut rng, &[n, dy], -1.0, 1.0);
        // Make the pair dependent so the gradient is not trivially small.
        for r in 0..n {
            y.row_mut(r)[0] += x.row(r)[0];
        }
        let (px, py) = (pinned(&x)?, pinned(&y)?);
        let mut params = vec![Parameter::new("x", x), Parameter::new("y", y)];
        check.record(i, &mut params, |p, backprop| {
            let r = hsic_value_and_grad_with(&p[0].value, &px, &p[1].value, &py)?;
            if backprop {
                add_grad(&mut p[0], &r.grad_x);
                add_grad(&mut p[1], &r.grad_y);
            }
            Ok(r.value)
        })?;
    }
    Ok(check.result)
}

fn check_debias(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut check = Check::new("debias_objective", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let (b, k, d) = (rng.random_range(3..9), rng.random_range(2..5), rng.random_range(1..5));
        let y = labels(&mut rng, b, k);
        let lambda = rng.random_range(0.1..2.0);
        let e = uniform_tensor(&mut rng, &[b, k], 0.05, 5.0);
        let f = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let h0 = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let h1 = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let kernels = KernelChoice {
            f: pinned(&f)?,
            h: [pinned(&h0)?, pinned(&h1)?],
        };
        let mut params = vec![Parameter::new("evidence", e), Parameter::new("f", f)];
        check.record(i, &mut params, |p, backprop| {
            let t = debias_objective(&y, &p[0].value, &p[1].value, [&h0, &h1], lambda, &kernels)?;
            if backprop {
                add_grad(&mut p[0], &t.grad_evidence);
                add_grad(&mut p[1], &t.grad_features);
            }
            Ok(t.loss)
        })?;
    }
    Ok(check.result)
}

fn check_bias(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut check = Check::new("bias_objective", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let (b, k, d) = (rng.random_range(3..9), rng.random_range(2..5), rng.random_range(1..5));
        let y = labels(&mut rng, b, k);
        let lambda = rng.random_range(0.1..2.0);
        let f = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let e0 = uniform_tensor(&mut rng, &[b, k], 0.05, 5.0);
        let e1 = uniform_tensor(&mut rng, &[b, k], 0.05, 5.0);
        let h0 = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let h1 = uniform_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let kernels = KernelChoice {
            f: pinned(&f)?,
            h: [pinned(&h0)?, pinned(&h1)?],
        };
        let mut params = vec![
            Parameter::new("evidence_shuffled", e0),
            Parameter::new("evidence_static", e1),
            Parameter::new("h_shuffled", h0),
            Parameter::new("h_static", h1),
        ];
        check.record(i, &mut params, |p, backprop| {
            let t = bias_objective(
                &y,
                [&p[0].value, &p[1].value],
                &f,
                [&p[2].value, &p[3].value],
                lambda,
                &kernels,
            )?;
            if backprop {
                for j in 0..2 {
                    add_grad(&mut p[j], &t.grad_evidence[j]);
                    add_grad(&mut p[2 + j], &t.grad_features[j]);
                }
            }
            Ok(t.loss)
        })?;
    }
    Ok(check.result)
}

fn small_arch(rng: &mut RunRng) -> Architecture {
    Architecture {
        hidden_channels: rng.random_range(2..5),
        kernel_width: rng.random_range(2..4),
        conv_layers: rng.random_range(1..3),
    }
}

/// Conv backbone, dense head, evidence function, EDL and EUC end to end.
fn check_model(opts: &SuiteOptions, evidence: EvidenceFunction) -> Result<CheckResult> {
    let mut check = Check::new("composed_model", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let arch = small_arch(&mut rng);
        let (b, c, k) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(2..5));
        let t = arch.min_timesteps() + rng.random_range(0..4);
        let x = uniform_tensor(&mut rng, &[b, c, t], -1.0, 1.0);
        let y = labels(&mut rng, b, k);
        let lambda_t = rng.random_range(0.01..1.0);
        let base = Classifier::new(&arch, c, k, OutputKind::Evidential { evidence }, &mut rng)?;
        let mut model = jitter_off_kinks(&base, &mut rng, opts.eps, |m| {
            m.branch.forward(&x)?;
            Ok(relu_margin(&m.branch.backbone))
        })?;
        let bug = opts.inject_bug;
        check.record(i, &mut model, |m, backprop| {
            let (_, logits) = m.branch.forward(&x)?;
            let e = evidence_from_logit_batch(&logits, evidence);
            let (edl, euc, grad_e) = evidential_terms(&y, &e, Some((1.0, lambda_t)))?;
            if backprop {
                let gl = if bug {
                    grad_e.clone()
                } else {
                    evidence_grad_to_logits(&grad_e, &logits, evidence)
                };
                m.branch.backward(&gl, None)?;
            }
            Ok(edl + euc)
        })?;
    }
    Ok(check.result)
}

/// All three branches with the step's actual gradient routing: the middle
/// branch descends `EDL + w_euc EUC + w_ced lambda sum HSIC`, the biased
/// branches descend `w_ced * bias_objective`. Each side is checked against
/// its own scalar.
fn check_ced_model(opts: &SuiteOptions, evidence: EvidenceFunction) -> Result<CheckResult> {
    let mut check = Check::new("composed_ced_model", opts);
    for i in 0..opts.instances {
        let mut rng = check.rng(i);
        let arch = small_arch(&mut rng);
        let (b, c, k) = (rng.random_range(3..6), rng.random_range(1..4), rng.random_range(2..5));
        let t = arch.min_timesteps() + rng.random_range(1..4);
        let x = uniform_tensor(&mut rng, &[b, c, t], -1.0, 1.0);
        let y = labels(&mut rng, b, k);
        let (lambda, w_ced, lambda_t) = (
            rng.random_range(0.1..2.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.01..1.0),
        );
        let perm_seed: u64 = rng.random();
        let base = CedBranches::new(&arch, c, k, evidence, &mut rng)?;
        let mut model = jitter_off_kinks(&base, &mut rng, opts.eps, |m| {
            m.ced_forward(&x, &mut seeded(perm_seed))?;
            Ok(relu_margin(&m.f.backbone)
                .min(relu_margin(&m.h_shuffled.backbone))
                .min(relu_margin(&m.h_static.backbone)))
        })?;
        let fwd = model.ced_forward(&x, &mut seeded(perm_seed))?;
        let kernels = KernelChoice::pinned(&fwd, &KernelParams::default())?;

        // Middle branch.
        let mut f_model = model.clone();
        check.record(i, &mut f_model.f.clone(), |branch, backprop| {
            f_model.f = branch.clone();
            let fwd = f_model.ced_forward(&x, &mut seeded(perm_seed))?;
            let (edl, euc, grad_e) = evidential_terms(&y, &fwd.evidence[0], Some((1.0, lambda_t)))?;
            let t = debias_objective(&y, &fwd.evidence[0], &fwd.f, [&fwd.h_shuffled, &fwd.h_static], lambda, &kernels)?;
            if backprop {
                let mut gf = t.grad_features.clone();
                gf.scale(w_ced);
                f_model.backward_debias(&fwd, &grad_e, Some(&gf))?;
                copy_grads(&f_model.f, branch);
            }
            Ok(edl + euc + w_ced * lambda * (t.hsic[0] + t.hsic[1]))
        })?;

        // Biased branches.
        let mut h_model = model.clone();
        let mut pair = (h_model.h_shuffled.clone(), h_model.h_static.clone());
        check.record(i, &mut pair, |pair, backprop| {
            h_model.h_shuffled = pair.0.clone();
            h_model.h_static = pair.1.clone();
            let fwd = h_model.ced_forward(&x, &mut seeded(perm_seed))?;
            let t = bias_objective(
                &y,
                [&fwd.evidence[1], &fwd.evidence[2]],
                &fwd.f,
                [&fwd.h_shuffled, &fwd.h_static],
                lambda,
                &kernels,
            )?;
            if backprop {
                let mut ge = t.grad_evidence.clone();
                let mut gf = t.grad_features.clone();
                ge.iter_mut().chain(gf.iter_mut()).for_each(|g| g.scale(w_ced));
                h_model.backward_bias(&fwd, &ge, &gf)?;
                copy_grads(&h_model.h_shuffled, &mut pair.0);
                copy_grads(&h_model.h_static, &mut pair.1);
            }
            Ok(w_ced * t.loss)
        })?;
    }
    check.result.instances = opts.instances;
    Ok(check.result)
}

impl ParamSource for (crate::model::Branch, crate::model::Branch) {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.0.params_mut();
        p.extend(self.1.params_mut());
        p
    }
}

fn copy_grads(from: &crate::model::Branch, to: &mut crate::model::Branch) {
    for (src, dst) in from.params().into_iter().zip(to.params_mut()) {
        dst.grad = src.grad.clone();
    }
}

/// Runs every check. `evidence` selects the evidence function used by the
/// composed-model checks.
pub fn run_suite(evidence: EvidenceFunction, opts: &SuiteOptions) -> Result<SuiteReport> {
    Ok(SuiteReport {
        tolerance: opts.tolerance,
        checks: vec![
            check_edl(opts)?,
            check_euc(opts)?,
            check_hsic(opts)?,
            check_debias(opts)?,
            check_bias(opts)?,
            check_model(opts, evidence)?,
            check_ced_model(opts, evidence)?,
        ],
    })
}
