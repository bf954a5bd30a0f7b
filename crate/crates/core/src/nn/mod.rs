//! Minimal reverse-mode network core.
//!
//! Layers cache their inputs on `forward` and accumulate parameter gradients
//! on `backward`. Every reduction runs in a fixed order, so identical seeds and
//! inputs give bit-identical results.

mod gradcheck;
mod layers;
mod optim;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamError, ParamSource};
pub use layers::{Conv1d, Dense, Layer, LayerSpec, Parameter};
pub use optim::{LrSchedule, Sgd};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A chain of layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    specs: Vec<LayerSpec>,
    in_features: usize,
    out_features: usize,
}

impl Sequential {
    pub fn build(
        specs: &[LayerSpec],
        in_features: usize,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut width = in_features;
        for (i, spec) in specs.iter().enumerate() {
            let (layer, out) = Layer::build(*spec, width, &format!("{prefix}.{i}"), rng)?;
            layers.push(layer);
            width = out;
        }
        Ok(Sequential {
            layers,
            specs: specs.to_vec(),
            in_features,
            out_features: width,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }
}

/// Independently permutes the time axis of every sample in a `B x C x T`
/// tensor. All channels of a sample move together.
pub fn temporal_shuffle(x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let perms = draw_permutations(x, rng)?;
    apply_permutations(x, &perms)
}

pub fn draw_permutations(x: &Tensor, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    x.expect_rank("temporal_shuffle", 3)?;
    let (b, t) = (x.shape()[0], x.shape()[2]);
    Ok((0..b)
        .map(|_| {
            let mut p: Vec<usize> = (0..t).collect();
            p.shuffle(rng);
            p
        })
        .collect())
}

pub fn apply_permutations(x: &Tensor, perms: &[Vec<usize>]) -> Result<Tensor> {
    x.expect_rank("temporal_shuffle", 3)?;
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if perms.len() != b || perms.iter().any(|p| p.len() != t) {
        return Err(Error::invalid("permutations", "one length-T permutation per sample"));
    }
    let mut out = Tensor::zeros(x.shape());
    let (src, dst) = (x.data(), out.data_mut());
    for (bi, perm) in perms.iter().enumerate() {
        for ci in 0..c {
            let base = (bi * c + ci) * t;
            for (ti, &from) in perm.iter().enumerate() {
                dst[base + ti] = src[base + from];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn seq(specs: &[LayerSpec], cin: usize) -> Sequential {
        Sequential::build(specs, cin, "net", &mut seeded(7)).unwrap()
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mean_pool_of_constant_sequence_is_identity() {
        let mut net = seq(&[LayerSpec::TemporalMeanPool], 2);
        let x = Tensor::from_vec(&[1, 2, 3], vec![4.0, 4.0, 4.0, -1.5, -1.5, -1.5]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[4.0, -1.5]);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = seq(&[LayerSpec::Dense { out_dim: 3 }], 3);
        if let Layer::Dense(d) = &mut net.layers[0] {
            let w = d.weight.value.data_mut();
            w.fill(0.0);
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let x = random_input(&[2, 3], 1);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic() {
        let specs = [
            LayerSpec::TemporalConv {
                out_channels: 4,
                width: 3,
            },
            LayerSpec::Relu,
            LayerSpec::TemporalMeanPool,
        ];
        let x = random_input(&[2, 3, 8], 2);
        let a = seq(&specs, 3).forward(&x).unwrap();
        let b = seq(&specs, 3).forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut net = seq(&[LayerSpec::Dense { out_dim: 2 }], 3);
        let err = net.forward(&Tensor::zeros(&[2, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut net = seq(&[LayerSpec::Dense { out_dim: 2 }], 3);
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 2])),
            Err(Error::BackwardBeforeForward(_))
        ));
    }

    #[test]
    fn linear_dense_gradient_is_outer_product() {
        // loss = sum(W x + b)  =>  dW[o][i] = sum_b x[b][i],  db[o] = B
        let mut net = seq(&[LayerSpec::Dense { out_dim: 2 }], 3);
        let x = random_input(&[4, 3], 3);
        let out = net.forward(&x).unwrap();
        let mut ones = Tensor::zeros(out.shape());
        ones.fill(1.0);
        net.backward(&ones).unwrap();
        let params = net.params();
        for o in 0..2 {
            for i in 0..3 {
                let expected: f64 = (0..4).map(|b| x.row(b)[i]).sum();
                let got = params[0].grad.data()[o * 3 + i];
                assert!((got - expected).abs() < 1e-14);
            }
            assert_eq!(params[1].grad.data()[o], 4.0);
        }
    }

    #[test]
    fn backward_accumulates_and_zero_upstream_is_noop() {
        let specs = [
            LayerSpec::PointwiseConv { out_channels: 2 },
            LayerSpec::TemporalMeanPool,
        ];
        let mut net = seq(&specs, 2);
        let x = random_input(&[3, 2, 5], 4);
        let out = net.forward(&x).unwrap();
        net.backward(&Tensor::zeros(out.shape())).unwrap();
        assert!(net.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        let mut ones = Tensor::zeros(out.shape());
        ones.fill(1.0);
        net.backward(&ones).unwrap();
        let once: Vec<f64> = net.params()[0].grad.data().to_vec();
        net.backward(&ones).unwrap();
        for (twice, once) in net.params()[0].grad.data().iter().zip(&once) {
            assert_eq!(*twice, 2.0 * once);
        }
    }

    #[test]
    fn shuffle_with_single_step_is_identity() {
        let x = random_input(&[3, 2, 1], 5);
        assert_eq!(temporal_shuffle(&x, &mut seeded(1)).unwrap(), x);
    }

    #[test]
    fn shuffle_preserves_per_channel_multisets() {
        let x = random_input(&[2, 3, 7], 6);
        let y = temporal_shuffle(&x, &mut seeded(2)).unwrap();
        for (a, b) in x.data().chunks(7).zip(y.data().chunks(7)) {
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        // channels of one sample share the permutation
        let perms = draw_permutations(&x, &mut seeded(2)).unwrap();
        assert_eq!(apply_permutations(&x, &perms).unwrap(), y);
    }

    #[test]
    fn shuffle_replays_from_seed() {
        let x = random_input(&[1, 1, 6], 7);
        let perms = draw_permutations(&x, &mut seeded(42)).unwrap();
        let again = draw_permutations(&x, &mut seeded(42)).unwrap();
        assert_eq!(perms, again);
        assert_eq!(perms[0].len(), 6);
        let mut sorted = perms[0].clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn temporal_conv_sees_order_pointwise_does_not() {
        let x = random_input(&[2, 3, 12], 8);
        let shuffled = temporal_shuffle(&x, &mut seeded(3)).unwrap();
        let mut temporal = seq(
            &[
                LayerSpec::TemporalConv {
                    out_channels: 4,
                    width: 3,
                },
                LayerSpec::Relu,
                LayerSpec::TemporalMeanPool,
            ],
            3,
        );
        let a = temporal.forward(&x).unwrap();
        let b = temporal.forward(&shuffled).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(u, v)| (u - v).abs() > 1e-6));

        let mut pointwise = seq(
            &[
                LayerSpec::PointwiseConv { out_channels: 4 },
                LayerSpec::Relu,
                LayerSpec::TemporalMeanPool,
            ],
            3,
        );
        let a = pointwise.forward(&x).unwrap();
        let b = pointwise.forward(&shuffled).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_conv_rejects_width_one() {
        let r = Sequential::build(
            &[LayerSpec::TemporalConv {
                out_channels: 2,
                width: 1,
            }],
            2,
            "n",
            &mut seeded(0),
        );
        assert!(r.is_err());
    }
}
