//! Hilbert-Schmidt Independence Criterion with RBF kernels.
//!
//! The biased estimator `tr(Kx H Ky H) / (n - 1)^2` is used throughout, with
//! `H = I - 11^T / n`. Bandwidths come from the median heuristic unless fixed;
//! under differentiation the bandwidth is held constant.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median of the non-zero pairwise distances; 1.0 if all are zero.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub bandwidth: Bandwidth,
    /// Subtract the per-batch feature mean before computing kernels.
    pub center_features: bool,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            bandwidth: Bandwidth::MedianHeuristic,
            center_features: false,
        }
    }
}

impl KernelParams {
    pub fn fixed(sigma: f64) -> Self {
        KernelParams {
            bandwidth: Bandwidth::Fixed(sigma),
            center_features: false,
        }
    }
}

/// Symmetric `n x n` kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "GramMatrix::from_vec",
                expected: vec![n, n],
                actual: vec![data.len()],
            });
        }
        Ok(GramMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_features(x: &Tensor) -> Result<(usize, usize)> {
    x.expect_rank("hsic features", 2)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::invalid(
            "hsic features",
            format!("need at least 2 samples, got {n}"),
        ));
    }
    ensure_finite("hsic features", x.data())?;
    Ok((n, d))
}

fn centered(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|i| x.row(i)[c]).sum::<f64>() / n as f64;
        for i in 0..n {
            out.row_mut(i)[c] -= mean;
        }
    }
    out
}

fn squared_distances(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d2;
            dist[j * n + i] = d2;
        }
    }
    dist
}

fn median_sigma(dist2: &[f64], n: usize) -> f64 {
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dist2[i * n + j].sqrt())
        .filter(|&v| v > 0.0)
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Resolves the bandwidth a given feature batch would use.
pub fn resolve_bandwidth(x: &Tensor, params: &KernelParams) -> Result<f64> {
    let (n, _) = check_features(x)?;
    match params.bandwidth {
        Bandwidth::Fixed(sigma) => {
            if sigma > 0.0 && sigma.is_finite() {
                Ok(sigma)
            } else {
                Err(Error::invalid("bandwidth", format!("must be > 0, got {sigma}")))
            }
        }
        Bandwidth::MedianHeuristic => {
            let x = if params.center_features { centered(x) } else { x.clone() };
            Ok(median_sigma(&squared_distances(&x), n))
        }
    }
}

/// `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))`; returns the matrix and sigma used.
pub fn rbf_gram(x: &Tensor, params: &KernelParams) -> Result<(GramMatrix, f64)> {
    let (n, _) = check_features(x)?;
    let sigma = resolve_bandwidth(x, params)?;
    let x = if params.center_features { centered(x) } else { x.clone() };
    let dist2 = squared_distances(&x);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = dist2.iter().map(|d| (-d * inv).exp()).collect();
    Ok((GramMatrix { n, data }, sigma))
}

/// `H K H` for a square `n x n` matrix.
fn double_center(k: &GramMatrix) -> Vec<f64> {
    let n = k.n;
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n)
        .map(|i| k.data[i * n..(i + 1) * n].iter().sum::<f64>() / nf)
        .collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| k.data[i * n + j]).sum::<f64>() / nf)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.data[i * n + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

pub fn hsic_biased(kx: &GramMatrix, ky: &GramMatrix) -> Result<f64> {
    if kx.n != ky.n {
        return Err(Error::ShapeMismatch {
            op: "hsic_biased",
            expected: vec![kx.n, kx.n],
            actual: vec![ky.n, ky.n],
        });
    }
    if kx.n < 2 {
        return Err(Error::invalid("hsic", "need at least 2 samples"));
    }
    let centered_y = double_center(ky);
    let trace: f64 = kx.data.iter().zip(&centered_y).map(|(a, b)| a * b).sum();
    let denom = (kx.n - 1) as f64;
    Ok(trace / (denom * denom))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsicGrad {
    pub value: f64,
    pub grad_x: Tensor,
    pub grad_y: Tensor,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

/// HSIC between two feature batches and its gradient with respect to both.
pub fn hsic_value_and_grad(x: &Tensor, y: &Tensor, params: &KernelParams) -> Result<HsicGrad> {
    hsic_value_and_grad_with(x, params, y, params)
}

/// As [`hsic_value_and_grad`] with separate kernel settings per side.
pub fn hsic_value_and_grad_with(
    x: &Tensor,
    params_x: &KernelParams,
    y: &Tensor,
    params_y: &KernelParams,
) -> Result<HsicGrad> {
    let (n, _) = check_features(x)?;
    let (ny, _) = check_features(y)?;
    if n != ny {
        return Err(Error::ShapeMismatch {
            op: "hsic_value_and_grad",
            expected: vec![n],
            actual: vec![ny],
        });
    }
    let (kx, sigma_x) = rbf_gram(x, params_x)?;
    let (ky, sigma_y) = rbf_gram(y, params_y)?;
    let denom = ((n - 1) * (n - 1)) as f64;
    let hky = double_center(&ky);
    let hkx = double_center(&kx);
    let value = kx.data.iter().zip(&hky).map(|(a, b)| a * b).sum::<f64>() / denom;
    let grad_x = kernel_input_grad(x, &kx, &hky, sigma_x, denom, params_x.center_features);
    let grad_y = kernel_input_grad(y, &ky, &hkx, sigma_y, denom, params_y.center_features);
    Ok(HsicGrad {
        value,
        grad_x,
        grad_y,
        sigma_x,
        sigma_y,
    })
}

/// d/dx of `sum_ij W_ij K_ij / denom` with `K` an RBF kernel on rows of `x`.
fn kernel_input_grad(
    x: &Tensor,
    k: &GramMatrix,
    weights: &[f64],
    sigma: f64,
    denom: f64,
    center: bool,
) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let xc = if center { centered(x) } else { x.clone() };
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut grad = Tensor::zeros(&[n, d]);
    for a in 0..n {
        let xa = xc.row(a).to_vec();
        let g = grad.row_mut(a);
        for j in 0..n {
            if j == a {
                continue;
            }
            let coeff = -2.0 * weights[a * n + j] * k.data[a * n + j] * inv_s2 / denom;
            for (c, gc) in g.iter_mut().enumerate() {
                *gc += coeff * (xa[c] - xc.row(j)[c]);
            }
        }
    }
    if center {
        // The gradient is translation-invariant already; project anyway.
        grad = centered(&grad);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(n: usize, d: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[n, d], v.to_vec()).unwrap()
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let x = t(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let (k, sigma) = rbf_gram(&x, &KernelParams::default()).unwrap();
        assert_eq!(sigma, 1.0);
        assert!(k.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kernel_at_sqrt2_sigma() {
        let sigma = 0.7;
        let x = t(2, 1, &[0.0, sigma * 2f64.sqrt()]);
        let (k, _) = rbf_gram(&x, &KernelParams::fixed(sigma)).unwrap();
        assert_abs_diff_eq!(k.get(0, 1), (-1f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k.get(0, 1), 0.367879, epsilon = 1e-6);
        assert_eq!(k.get(0, 0), 1.0);
        assert_eq!(k.get(1, 1), 1.0);
    }

    #[test]
    fn rejects_single_sample() {
        let x = t(1, 2, &[0.0, 1.0]);
        assert!(rbf_gram(&x, &KernelParams::default()).is_err());
    }

    #[test]
    fn two_by_two_closed_form() {
        let k = GramMatrix::from_vec(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        assert_abs_diff_eq!(hsic_biased(&k, &k).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn constant_side_is_zero() {
        let x = t(4, 1, &[0.0, 1.0, 3.0, 2.5]);
        let c = t(4, 1, &[5.0; 4]);
        let r = hsic_value_and_grad(&x, &c, &KernelParams::default()).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.grad_y.data().iter().all(|v| v.abs() < 1e-12));
        let r = hsic_value_and_grad(&c, &x, &KernelParams::default()).unwrap();
        assert!(r.grad_x.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = GramMatrix::from_vec(2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let b = GramMatrix::from_vec(3, vec![1.0; 9]).unwrap();
        assert!(hsic_biased(&a, &b).is_err());
    }

    #[test]
    fn self_dependence_is_positive() {
        let x = t(4, 2, &[0.0, 0.1, 1.0, -0.3, 0.4, 2.0, -1.0, 0.7]);
        let r = hsic_value_and_grad(&x, &x, &KernelParams::default()).unwrap();
        assert!(r.value > 0.0);
    }

    #[test]
    fn centering_flag_leaves_rbf_unchanged() {
        let x = t(4, 2, &[0.0, 0.1, 1.0, -0.3, 0.4, 2.0, -1.0, 0.7]);
        let y = t(4, 1, &[0.3, -0.2, 1.1, 0.0]);
        let a = hsic_value_and_grad(&x, &y, &KernelParams::default()).unwrap();
        let params = KernelParams {
            center_features: true,
            ..KernelParams::default()
        };
        let b = hsic_value_and_grad(&x, &y, &params).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
    }
}
