//! Layer building blocks and the named-parameter protocol shared by the
//! checkpoint format, the optimizer, and weight transfer.

use rand::Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::{Elem, Tensor};

/// Leaky-relu slope used throughout the networks.
pub const LRELU_ALPHA: f64 = 0.2;
/// Activation gain applied after leaky-relu inside style/critic blocks to
/// keep signal variance roughly constant with depth.
pub const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

/// Visitor-style access to named parameters. Names are slash-separated
/// paths like `gen/syn/b8/conv0/weight`.
pub trait ParamSet<E: Elem> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>);
}

pub fn named_params<E: Elem, M: ParamSet<E>>(m: &M, prefix: &str) -> Vec<(String, &Tensor<E>)> {
    let mut out = Vec::new();
    m.collect(prefix, &mut out);
    out
}

pub fn named_params_mut<E: Elem, M: ParamSet<E>>(
    m: &mut M,
    prefix: &str,
) -> Vec<(String, &mut Tensor<E>)> {
    let mut out = Vec::new();
    m.collect_mut(prefix, &mut out);
    out
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Fully connected layer, y = x·W + b.
pub struct Dense<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Elem> Dense<E> {
    /// Weights ~ N(0, 1/sqrt(fan_in)); bias constant.
    pub fn init(din: usize, dout: usize, bias_value: f64, rng: &mut impl Rng) -> Self {
        Dense {
            weight: Tensor::randn(vec![din, dout], 1.0 / (din as f64).sqrt(), rng).with_grad(),
            bias: Tensor::full(vec![dout], E::from_f64(bias_value)).with_grad(),
        }
    }

    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        g.matmul_bias(x, &self.weight, &self.bias)
    }
}

impl<E: Elem> ParamSet<E> for Dense<E> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Plain convolution layer (odd square kernel, unit stride, same padding).
pub struct Conv2d<E> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Elem> Conv2d<E> {
    pub fn init(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        Conv2d {
            weight: Tensor::randn(vec![cout, cin, k, k], 1.0 / fan_in.sqrt(), rng).with_grad(),
            bias: bias.then(|| Tensor::zeros(vec![cout]).with_grad()),
        }
    }

    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let k = self.weight.dim(2);
        let y = g.conv2d(x, &self.weight, 1, k / 2)?;
        match &self.bias {
            Some(b) => {
                let b4 = g.reshape(b, vec![1, b.dim(0), 1, 1])?;
                g.add(&y, &b4)
            }
            None => Ok(y),
        }
    }

    /// forward + leaky-relu with the block activation gain.
    pub fn forward_act(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.forward(g, x)?;
        g.scale(&g.leaky_relu(&y, LRELU_ALPHA)?, ACT_GAIN)
    }
}

impl<E: Elem> ParamSet<E> for Conv2d<E> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Style-modulated convolution: an affine layer maps the w latent to
/// per-input-channel scales; with `demodulate` each effective output filter
/// is rescaled to unit L2 norm (eps 1e-8) before the convolution acts.
pub struct ModulatedConv2d<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub affine: Dense<E>,
    pub demodulate: bool,
}

pub const DEMOD_EPS: f64 = 1e-8;

impl<E: Elem> ModulatedConv2d<E> {
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        latent_dim: usize,
        demodulate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        ModulatedConv2d {
            weight: Tensor::randn(vec![cout, cin, k, k], 1.0 / fan_in.sqrt(), rng).with_grad(),
            bias: Tensor::zeros(vec![cout]).with_grad(),
            // bias 1 so styles start as identity modulation
            affine: Dense::init(latent_dim, cin, 1.0, rng),
            demodulate,
        }
    }

    /// Pre-activation output. Modulating the input channels by s and
    /// convolving with the base weight equals convolving with the
    /// per-sample scaled weight; demodulation multiplies each output map by
    /// the inverse L2 norm of its effective filter.
    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>, w_latent: &Tensor<E>) -> Result<Tensor<E>> {
        let n = x.dim(0);
        let cin = self.weight.dim(1);
        let cout = self.weight.dim(0);
        let k = self.weight.dim(2);
        let s = self.affine.forward(g, w_latent)?; // (N, Cin)
        let s4 = g.reshape(&s, vec![n, cin, 1, 1])?;
        let xm = g.mul(x, &s4)?;
        let mut y = g.conv2d(&xm, &self.weight, 1, k / 2)?;
        if self.demodulate {
            // d[n,o] = rsqrt(Σ_i s[n,i]² · Σ_k W[o,i,k]² + eps)
            let wsq = g.mul(&self.weight, &self.weight)?;
            let wsum = g.sum_axes(&wsq, &[2, 3])?; // (O, I, 1, 1)
            let wmat = g.transpose2d(&g.reshape(&wsum, vec![cout, cin])?)?; // (I, O)
            let s2 = g.mul(&s, &s)?;
            let d = g.rsqrt(&g.add_scalar(&g.matmul(&s2, &wmat)?, DEMOD_EPS)?)?; // (N, O)
            let d4 = g.reshape(&d, vec![n, cout, 1, 1])?;
            y = g.mul(&y, &d4)?;
        }
        let b4 = g.reshape(&self.bias, vec![1, cout, 1, 1])?;
        g.add(&y, &b4)
    }

    /// forward + leaky-relu + gain: the style-block layer.
    pub fn forward_act(&self, g: &Graph<E>, x: &Tensor<E>, w_latent: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.forward(g, x, w_latent)?;
        g.scale(&g.leaky_relu(&y, LRELU_ALPHA)?, ACT_GAIN)
    }
}

impl<E: Elem> ParamSet<E> for ModulatedConv2d<E> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
        self.affine.collect(&join(prefix, "affine"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
        self.affine.collect_mut(&join(prefix, "affine"), out);
    }
}
