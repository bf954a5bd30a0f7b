use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution over time with a kernel spanning `width >= 2` steps (valid padding).
    TemporalConv { out_channels: usize, width: usize },
    /// Per-timestep channel mixing (kernel width 1).
    PointwiseConv { out_channels: usize },
    Dense { out_dim: usize },
    Relu,
    TemporalMeanPool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv1d),
    Dense(Dense),
    Relu { cache: Option<Tensor> },
    TemporalMeanPool { cache: Option<Vec<usize>> },
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Layer {
    /// Builds a layer from its spec given the input feature count (channels or dims).
    pub fn build(
        spec: LayerSpec,
        in_features: usize,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<(Layer, usize)> {
        Ok(match spec {
            LayerSpec::TemporalConv {
                out_channels,
                width,
            } => {
                if width < 2 {
                    return Err(Error::invalid(
                        "TemporalConv width",
                        format!("must be >= 2, got {width}"),
                    ));
                }
                (
                    Layer::Conv(Conv1d::new(prefix, in_features, out_channels, width, rng)),
                    out_channels,
                )
            }
            LayerSpec::PointwiseConv { out_channels } => (
                Layer::Conv(Conv1d::new(prefix, in_features, out_channels, 1, rng)),
                out_channels,
            ),
            LayerSpec::Dense { out_dim } => {
                (Layer::Dense(Dense::new(prefix, in_features, out_dim, rng)), out_dim)
            }
            LayerSpec::Relu => (Layer::Relu { cache: None }, in_features),
            LayerSpec::TemporalMeanPool => (Layer::TemporalMeanPool { cache: None }, in_features),
        })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Relu { cache } => {
                let mut out = x.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                *cache = Some(x.clone());
                Ok(out)
            }
            Layer::TemporalMeanPool { cache } => {
                x.expect_rank("TemporalMeanPool", 3)?;
                let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = Tensor::zeros(&[b, c]);
                for (o, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(t)) {
                    *o = chunk.iter().sum::<f64>() / t as f64;
                }
                *cache = Some(x.shape().to_vec());
                Ok(out)
            }
        }
    }

    /// Accumulates parameter gradients and returns the gradient wrt the input.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.backward(grad_out),
            Layer::Dense(d) => d.backward(grad_out),
            Layer::Relu { cache } => {
                let input = cache.as_ref().ok_or(Error::BackwardBeforeForward("Relu"))?;
                grad_out.expect_shape("Relu backward", input.shape())?;
                let mut g = grad_out.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(input.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(g)
            }
            Layer::TemporalMeanPool { cache } => {
                let shape = cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("TemporalMeanPool"))?;
                let (b, c, t) = (shape[0], shape[1], shape[2]);
                grad_out.expect_shape("TemporalMeanPool backward", &[b, c])?;
                let mut g = Tensor::zeros(shape);
                for (chunk, go) in g.data_mut().chunks_mut(t).zip(grad_out.data()) {
                    chunk.iter_mut().for_each(|v| *v = go / t as f64);
                }
                Ok(g)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }
}

/// 1-D convolution over the time axis of a `B x C x T` tensor, valid padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `out x in x width`
    pub weight: Parameter,
    pub bias: Parameter,
    cache: Option<Tensor>,
}

impl Conv1d {
    fn new(prefix: &str, cin: usize, cout: usize, width: usize, rng: &mut impl Rng) -> Self {
        let w = xavier(rng, cin * width, cout * width, cout * cin * width);
        Conv1d {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                Tensor::from_vec(&[cout, cin, width], w).expect("sized"),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[cout])),
            cache: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (cout, cin, width) = self.dims();
        x.expect_rank("Conv1d", 3)?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != cin {
            return Err(Error::ShapeMismatch {
                op: "Conv1d input channels",
                expected: vec![b, cin, t],
                actual: x.shape().to_vec(),
            });
        }
        if t < width {
            return Err(Error::invalid(
                "Conv1d",
                format!("sequence length {t} shorter than kernel width {width}"),
            ));
        }
        let tout = t - width + 1;
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[b, cout, tout]);
        let od = out.data_mut();
        for bi in 0..b {
            for o in 0..cout {
                let orow = &mut od[(bi * cout + o) * tout..(bi * cout + o + 1) * tout];
                orow.iter_mut().for_each(|v| *v = bias[o]);
                for ci in 0..cin {
                    let xrow = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                    let wrow = &w[(o * cin + ci) * width..(o * cin + ci + 1) * width];
                    for (j, &wj) in wrow.iter().enumerate() {
                        for (ov, xv) in orow.iter_mut().zip(&xrow[j..j + tout]) {
                            *ov += wj * xv;
                        }
                    }
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (cout, cin, width) = self.dims();
        let x = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("Conv1d"))?;
        let (b, t) = (x.shape()[0], x.shape()[2]);
        let tout = t - width + 1;
        grad_out.expect_shape("Conv1d backward", &[b, cout, tout])?;
        let xd = x.data();
        let gd = grad_out.data();
        let w = self.weight.value.data().to_vec();
        let mut gx = Tensor::zeros(x.shape());
        {
            let gw = self.weight.grad.data_mut();
            let gxd = gx.data_mut();
            for bi in 0..b {
                for o in 0..cout {
                    let grow = &gd[(bi * cout + o) * tout..(bi * cout + o + 1) * tout];
                    for ci in 0..cin {
                        let base = (bi * cin + ci) * t;
                        for j in 0..width {
                            let widx = (o * cin + ci) * width + j;
                            let xs = &xd[base + j..base + j + tout];
                            gw[widx] += grow.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                            let wj = w[widx];
                            for (gxv, g) in gxd[base + j..base + j + tout].iter_mut().zip(grow) {
                                *gxv += wj * g;
                            }
                        }
                    }
                }
            }
        }
        let gb = self.bias.grad.data_mut();
        for bi in 0..b {
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += gd[(bi * cout + o) * tout..(bi * cout + o + 1) * tout]
                    .iter()
                    .sum::<f64>();
            }
        }
        Ok(gx)
    }
}

/// Fully connected layer on a `B x D` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Parameter,
    pub bias: Parameter,
    cache: Option<Tensor>,
}

impl Dense {
    fn new(prefix: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = xavier(rng, din, dout, din * dout);
        Dense {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                Tensor::from_vec(&[dout, din], w).expect("sized"),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[dout])),
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (dout, din) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        x.expect_rank("Dense", 2)?;
        let b = x.shape()[0];
        if x.shape()[1] != din {
            return Err(Error::ShapeMismatch {
                op: "Dense input",
                expected: vec![b, din],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[b, dout]);
        for i in 0..b {
            let xi = x.row(i).to_vec();
            let oi = out.row_mut(i);
            for (o, ov) in oi.iter_mut().enumerate() {
                let wrow = &self.weight.value.data()[o * din..(o + 1) * din];
                *ov = self.bias.value.data()[o]
                    + wrow.iter().zip(&xi).map(|(w, x)| w * x).sum::<f64>();
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (dout, din) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let x = self.cache.as_ref().ok_or(Error::BackwardBeforeForward("Dense"))?;
        let b = x.shape()[0];
        grad_out.expect_shape("Dense backward", &[b, dout])?;
        let mut gx = Tensor::zeros(&[b, din]);
        let w = self.weight.value.data();
        for i in 0..b {
            let go = grad_out.row(i);
            let xi = x.row(i);
            let gw = self.weight.grad.data_mut();
            for o in 0..dout {
                for (gwv, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xi) {
                    *gwv += go[o] * xv;
                }
            }
            let gb = self.bias.grad.data_mut();
            for (gbv, g) in gb.iter_mut().zip(go) {
                *gbv += g;
            }
            let gxi = gx.row_mut(i);
            for o in 0..dout {
                for (gxv, wv) in gxi.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *gxv += go[o] * wv;
                }
            }
        }
        Ok(gx)
    }
}
