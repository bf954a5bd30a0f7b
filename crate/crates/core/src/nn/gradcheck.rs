use rand::seq::index::sample;
use serde::Serialize;

use crate::error::Result;
use crate::rng::seeded;

use super::{Parameter, Sequential};

/// Anything exposing a stable, ordered list of trainable parameters.
pub trait ParamSource {
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
}

impl ParamSource for Sequential {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        Sequential::params_mut(self)
    }
}

impl ParamSource for Vec<Parameter> {
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; larger tensors are subsampled.
    pub max_coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            max_coords_per_param: 24,
            scale_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamError {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamError>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn failing(&self, tol: f64) -> Vec<&ParamError> {
        self.params.iter().filter(|p| p.max_rel_err >= tol).collect()
    }
}

/// Compares analytic gradients against central differences.
///
/// `eval(model, backprop)` must return the loss; when `backprop` is true it
/// must also accumulate gradients into the (already zeroed) parameters.
pub fn gradcheck<M, F>(model: &mut M, mut eval: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    M: ParamSource,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.params_mut().into_iter().for_each(Parameter::zero_grad);
    eval(model, true)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    let mut rng = seeded(opts.seed);
    let mut report = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= opts.max_coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let original = model.params_mut()[pi].value.data()[c];
            model.params_mut()[pi].value.data_mut()[c] = original + opts.eps;
            let plus = eval(model, false)?;
            model.params_mut()[pi].value.data_mut()[c] = original - opts.eps;
            let minus = eval(model, false)?;
            model.params_mut()[pi].value.data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let abs = (grad[c] - numeric).abs();
            let scale = grad[c].abs().max(numeric.abs()).max(opts.scale_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / scale);
        }
        report.push(ParamError {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradcheckReport { params: report })
}
