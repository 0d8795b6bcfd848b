//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records one op node per primitive call. Backward formulas are
//! themselves expressed through the same primitives, so calling
//! [`Graph::backward`] with `create_graph = true` yields gradient tensors that
//! can be differentiated again (needed by the R1 penalty).
//!
//! Nodes are appended in topological order and each node's inputs always have
//! smaller ids, so a single reverse sweep visits every node exactly once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Elem, NodeRef, Tensor, TensorId};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Transpose2d,
    Conv2d { stride: usize, ph: usize, pw: usize },
    LeakyRelu { alpha: f64 },
    Softplus,
    Sigmoid,
    Rsqrt,
    Sqrt,
    SumAxes,
    BroadcastTo,
    Reshape,
    NnUp2,
    BlockSum2,
    Blur3,
    Blur3Adjoint,
    Dilate2,
    SubsampleEven,
    FlipHw,
    Transpose01,
    ConcatChannels,
    SliceChannels { from: usize },
    ConcatRows,
    SliceRows { from: usize },
}

struct Node<E> {
    op: Op,
    /// Node id per input when the input is tracked; None for constants.
    inputs: Vec<Option<usize>>,
    /// Input values, saved for backward (constants included).
    saved: Vec<Tensor<E>>,
    /// Output value, saved for backward formulas that reuse it.
    out: Tensor<E>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

pub struct Graph<E: Elem> {
    id: u64,
    nodes: RefCell<Vec<Node<E>>>,
    leaves: RefCell<HashMap<TensorId, usize>>,
    grad_enabled: Cell<bool>,
}

/// RAII guard restoring the graph's grad mode.
pub struct GradMode<'g, E: Elem> {
    graph: &'g Graph<E>,
    prev: bool,
}

impl<E: Elem> Drop for GradMode<'_, E> {
    fn drop(&mut self) {
        self.graph.grad_enabled.set(self.prev);
    }
}

/// Resolution direction for [`Graph::resample2x`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Resample {
    Up,
    Down,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Temporarily disable recording: ops compute values but add no nodes.
    pub fn no_grad(&self) -> GradMode<'_, E> {
        let prev = self.grad_enabled.replace(false);
        GradMode { graph: self, prev }
    }

    fn set_grad_mode(&self, on: bool) -> GradMode<'_, E> {
        let prev = self.grad_enabled.replace(on);
        GradMode { graph: self, prev }
    }

    /// Node id of `t` in this graph: its producing node, or a leaf
    /// registration when it is a grad-requiring root.
    fn input_node(&self, t: &Tensor<E>) -> Result<Option<usize>> {
        if let Some(nr) = t.node() {
            if nr.graph != self.id {
                return Err(Error::contract(
                    "tensor belongs to a different graph; detach it before reuse",
                ));
            }
            return Ok(Some(nr.node));
        }
        if !t.requires_grad() {
            return Ok(None);
        }
        if let Some(&nid) = self.leaves.borrow().get(&t.id()) {
            return Ok(Some(nid));
        }
        let mut nodes = self.nodes.borrow_mut();
        let nid = nodes.len();
        let mut out = t.clone();
        out.set_node(NodeRef { graph: self.id, node: nid });
        nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), saved: Vec::new(), out });
        self.leaves.borrow_mut().insert(t.id(), nid);
        Ok(Some(nid))
    }

    fn push(
        &self,
        opname: &'static str,
        op: Op,
        inputs: &[&Tensor<E>],
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Result<Tensor<E>> {
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: opname });
        }
        let mut out = Tensor::from_vec(shape, data)?;
        if !self.grad_enabled.get() {
            return Ok(out);
        }
        let tracked: Vec<Option<usize>> =
            inputs.iter().map(|t| self.input_node(t)).collect::<Result<_>>()?;
        if tracked.iter().all(Option::is_none) {
            return Ok(out);
        }
        out.set_requires_grad(inputs.iter().any(|t| t.requires_grad()));
        let mut nodes = self.nodes.borrow_mut();
        let nid = nodes.len();
        out.set_node(NodeRef { graph: self.id, node: nid });
        nodes.push(Node {
            op,
            inputs: tracked,
            saved: inputs.iter().map(|t| (*t).clone()).collect(),
            out: out.clone(),
        });
        Ok(out)
    }

    // ── elementwise / broadcast ─────────────────────────────────────────

    fn bin(
        &self,
        opname: &'static str,
        op: Op,
        a: &Tensor<E>,
        b: &Tensor<E>,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let oshape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(opname, format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        let data = kernels::broadcast_bin(a.data(), a.shape(), b.data(), b.shape(), &oshape, f);
        self.push(opname, op, &[a, b], oshape, data)
    }

    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.bin("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.bin("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.bin("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&self, x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
        let k = E::from_f64(c);
        let data = x.data().iter().map(|&v| v * k).collect();
        self.push("scale", Op::Scale(c), &[x], x.shape().to_vec(), data)
    }

    pub fn add_scalar(&self, x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
        let k = E::from_f64(c);
        let data = x.data().iter().map(|&v| v + k).collect();
        self.push("add_scalar", Op::AddScalar(c), &[x], x.shape().to_vec(), data)
    }

    pub fn neg(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.scale(x, -1.0)
    }

    // ── activations ─────────────────────────────────────────────────────

    /// Elementwise max(x, alpha*x); alpha must lie in (0,1).
    pub fn leaky_relu(&self, x: &Tensor<E>, alpha: f64) -> Result<Tensor<E>> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::contract(format!("leaky_relu alpha {alpha} outside (0,1)")));
        }
        let a = E::from_f64(alpha);
        let data = x.data().iter().map(|&v| if v >= E::zero() { v } else { v * a }).collect();
        self.push("leaky_relu", Op::LeakyRelu { alpha }, &[x], x.shape().to_vec(), data)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let z = v.max(E::zero());
                z + (-v.abs()).exp().ln_1p()
            })
            .collect();
        self.push("softplus", Op::Softplus, &[x], x.shape().to_vec(), data)
    }

    pub fn sigmoid(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let one = E::one();
        let data = x
            .data()
            .iter()
            .map(|&v| {
                if v >= E::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            })
            .collect();
        self.push("sigmoid", Op::Sigmoid, &[x], x.shape().to_vec(), data)
    }

    pub fn rsqrt(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x.data().iter().map(|&v| E::one() / v.sqrt()).collect();
        self.push("rsqrt", Op::Rsqrt, &[x], x.shape().to_vec(), data)
    }

    pub fn sqrt(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let data = x.data().iter().map(|&v| v.sqrt()).collect();
        self.push("sqrt", Op::Sqrt, &[x], x.shape().to_vec(), data)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.push("matmul", Op::Matmul, &[a, b], vec![m, n], data)
    }

    pub fn transpose2d(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 {
            return Err(Error::shape("transpose2d", format!("{:?}", x.shape())));
        }
        let (r, c) = (x.dim(0), x.dim(1));
        let data = kernels::transpose2d(x.data(), r, c);
        self.push("transpose2d", Op::Transpose2d, &[x], vec![c, r], data)
    }

    /// y = x·w + b with b broadcast over rows.
    pub fn matmul_bias(&self, x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if b.rank() != 1 || b.dim(0) != w.dim(1) {
            return Err(Error::shape(
                "matmul_bias",
                format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
            ));
        }
        let y = self.matmul(x, w)?;
        let b2 = self.reshape(b, vec![1, b.dim(0)])?;
        self.add(&y, &b2)
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Direct cross-correlation with square odd kernels, stride 1 or 2.
    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        if w.rank() != 4 || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd extent, got {:?}", w.shape()),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::contract(format!("conv2d stride {stride} not in {{1,2}}")));
        }
        self.conv2d_raw(x, w, stride, pad, pad)
    }

    /// General convolution used internally by backward compositions
    /// (rectangular kernels, independent pads).
    pub(crate) fn conv2d_raw(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        stride: usize,
        ph: usize,
        pw: usize,
    ) -> Result<Tensor<E>> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, i, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if c != i {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} != weight input channels {i}"),
            ));
        }
        if ph >= kh || pw >= kw {
            return Err(Error::contract(format!(
                "conv2d pad ({ph},{pw}) must stay below kernel extents ({kh},{kw})"
            )));
        }
        let oh = kernels::conv_out_extent(h, kh, stride, ph)
            .ok_or_else(|| Error::shape("conv2d", format!("H={h} k={kh} s={stride} p={ph}")))?;
        let ow = kernels::conv_out_extent(wd, kw, stride, pw)
            .ok_or_else(|| Error::shape("conv2d", format!("W={wd} k={kw} s={stride} p={pw}")))?;
        let data = kernels::conv2d(x.data(), n, c, h, wd, w.data(), o, kh, kw, stride, ph, pw, oh, ow);
        self.push("conv2d", Op::Conv2d { stride, ph, pw }, &[x, w], vec![n, o, oh, ow], data)
    }

    // ── reductions / shape ──────────────────────────────────────────────

    /// Sum over `axes`, keeping reduced dims as extent 1.
    pub fn sum_axes(&self, x: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
        let mut mask = vec![false; x.rank()];
        for &a in axes {
            if a >= x.rank() {
                return Err(Error::shape("sum_axes", format!("axis {a} of rank {}", x.rank())));
            }
            mask[a] = true;
        }
        let (data, oshape) = kernels::reduce_sum(x.data(), x.shape(), &mask);
        self.push("sum_axes", Op::SumAxes, &[x], oshape, data)
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let axes: Vec<usize> = (0..x.rank()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(&s, Vec::new())
    }

    pub fn mean_all(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let n = x.numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n)
    }

    pub fn broadcast_to(&self, x: &Tensor<E>, target: Vec<usize>) -> Result<Tensor<E>> {
        if kernels::broadcast_shape(x.shape(), &target) != Some(target.clone()) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} to {:?}", x.shape(), target),
            ));
        }
        let data = kernels::broadcast_to(x.data(), x.shape(), &target);
        self.push("broadcast_to", Op::BroadcastTo, &[x], target, data)
    }

    pub fn reshape(&self, x: &Tensor<E>, shape: Vec<usize>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", x.shape(), shape),
            ));
        }
        self.push("reshape", Op::Reshape, &[x], shape, x.data().to_vec())
    }

    // ── resampling ──────────────────────────────────────────────────────

    fn spatial(x: &Tensor<E>, opname: &'static str) -> Result<(usize, usize, usize)> {
        if x.rank() != 4 {
            return Err(Error::shape(opname, format!("expected NCHW, got {:?}", x.shape())));
        }
        Ok((x.dim(0) * x.dim(1), x.dim(2), x.dim(3)))
    }

    pub fn nn_up2(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "nn_up2")?;
        let data = kernels::nn_up2(x.data(), planes, h, w);
        let shape = vec![x.dim(0), x.dim(1), 2 * h, 2 * w];
        self.push("nn_up2", Op::NnUp2, &[x], shape, data)
    }

    pub fn block_sum2(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "block_sum2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("block_sum2", format!("odd extents {h}x{w}")));
        }
        let data = kernels::block_sum2(x.data(), planes, h, w);
        let shape = vec![x.dim(0), x.dim(1), h / 2, w / 2];
        self.push("block_sum2", Op::BlockSum2, &[x], shape, data)
    }

    pub fn blur3(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "blur3")?;
        let data = kernels::blur3(x.data(), planes, h, w);
        self.push("blur3", Op::Blur3, &[x], x.shape().to_vec(), data)
    }

    pub fn blur3_adjoint(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "blur3_adjoint")?;
        let data = kernels::blur3_adjoint(x.data(), planes, h, w);
        self.push("blur3_adjoint", Op::Blur3Adjoint, &[x], x.shape().to_vec(), data)
    }

    pub(crate) fn dilate2(&self, x: &Tensor<E>, th: usize, tw: usize) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "dilate2")?;
        if !(th == 2 * h - 1 || th == 2 * h) || !(tw == 2 * w - 1 || tw == 2 * w) {
            return Err(Error::shape("dilate2", format!("{h}x{w} to {th}x{tw}")));
        }
        let data = kernels::dilate2(x.data(), planes, h, w, th, tw);
        let shape = vec![x.dim(0), x.dim(1), th, tw];
        self.push("dilate2", Op::Dilate2, &[x], shape, data)
    }

    pub(crate) fn subsample_even(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (planes, h, w) = Self::spatial(x, "subsample_even")?;
        let data = kernels::subsample_even(x.data(), planes, h, w);
        let shape = vec![x.dim(0), x.dim(1), (h + 1) / 2, (w + 1) / 2];
        self.push("subsample_even", Op::SubsampleEven, &[x], shape, data)
    }

    /// Resolution doubling/halving with a fixed binomial low-pass:
    /// up = smooth(nearest-duplicate), down = subsample(smooth).
    pub fn resample2x(&self, x: &Tensor<E>, dir: Resample) -> Result<Tensor<E>> {
        match dir {
            Resample::Up => {
                let up = self.nn_up2(x)?;
                self.blur3(&up)
            }
            Resample::Down => {
                let (_, h, w) = Self::spatial(x, "resample2x")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("resample2x", format!("odd extents {h}x{w}")));
                }
                let s = self.blur3(x)?;
                self.subsample_even(&s)
            }
        }
    }

    pub fn flip_hw(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 {
            return Err(Error::shape("flip_hw", format!("{:?}", x.shape())));
        }
        let data = kernels::flip_hw(x.data(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
        self.push("flip_hw", Op::FlipHw, &[x], x.shape().to_vec(), data)
    }

    pub fn transpose01(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() < 2 {
            return Err(Error::shape("transpose01", format!("{:?}", x.shape())));
        }
        let block: usize = x.shape()[2..].iter().product();
        let data = kernels::transpose01(x.data(), x.dim(0), x.dim(1), block);
        let mut shape = x.shape().to_vec();
        shape.swap(0, 1);
        self.push("transpose01", Op::Transpose01, &[x], shape, data)
    }

    // ── concat / slice ──────────────────────────────────────────────────

    pub fn concat_channels(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() != 4
            || b.rank() != 4
            || a.dim(0) != b.dim(0)
            || a.dim(2) != b.dim(2)
            || a.dim(3) != b.dim(3)
        {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} ++ {:?}", a.shape(), b.shape()),
            ));
        }
        let (n, ca, cb) = (a.dim(0), a.dim(1), b.dim(1));
        let hw = a.dim(2) * a.dim(3);
        let mut data = Vec::with_capacity((ca + cb) * n * hw);
        for ni in 0..n {
            data.extend_from_slice(&a.data()[ni * ca * hw..][..ca * hw]);
            data.extend_from_slice(&b.data()[ni * cb * hw..][..cb * hw]);
        }
        let shape = vec![n, ca + cb, a.dim(2), a.dim(3)];
        self.push("concat_channels", Op::ConcatChannels, &[a, b], shape, data)
    }

    pub fn slice_channels(&self, x: &Tensor<E>, from: usize, to: usize) -> Result<Tensor<E>> {
        if x.rank() != 4 || from >= to || to > x.dim(1) {
            return Err(Error::shape(
                "slice_channels",
                format!("[{from}..{to}] of {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.dim(2) * x.dim(3);
        let cs = to - from;
        let mut data = Vec::with_capacity(n * cs * hw);
        for ni in 0..n {
            data.extend_from_slice(&x.data()[(ni * c + from) * hw..][..cs * hw]);
        }
        let shape = vec![n, cs, x.dim(2), x.dim(3)];
        self.push("slice_channels", Op::SliceChannels { from }, &[x], shape, data)
    }

    /// Concatenate along the first axis (contiguous blocks).
    pub fn concat_rows(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rank() != b.rank() || a.rank() < 1 || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::shape(
                "concat_rows",
                format!("{:?} ++ {:?}", a.shape(), b.shape()),
            ));
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let mut shape = a.shape().to_vec();
        shape[0] += b.dim(0);
        self.push("concat_rows", Op::ConcatRows, &[a, b], shape, data)
    }

    pub fn slice_rows(&self, x: &Tensor<E>, from: usize, to: usize) -> Result<Tensor<E>> {
        if x.rank() < 1 || from >= to || to > x.dim(0) {
            return Err(Error::shape(
                "slice_rows",
                format!("[{from}..{to}] of {:?}", x.shape()),
            ));
        }
        let block: usize = x.shape()[1..].iter().product();
        let data = x.data()[from * block..to * block].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = to - from;
        self.push("slice_rows", Op::SliceRows { from }, &[x], shape, data)
    }

    // ── composites ──────────────────────────────────────────────────────

    /// Row-wise scaling by 1/sqrt(mean(x²) + 1e-8).
    pub fn normalize_2nd_moment(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 2 || x.dim(1) == 0 {
            return Err(Error::shape("normalize_2nd_moment", format!("{:?}", x.shape())));
        }
        let d = x.dim(1) as f64;
        let sq = self.mul(x, x)?;
        let ms = self.scale(&self.sum_axes(&sq, &[1])?, 1.0 / d)?;
        let inv = self.rsqrt(&self.add_scalar(&ms, 1e-8)?)?;
        self.mul(x, &inv)
    }

    /// Mean squared difference as a scalar.
    pub fn mse(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.mean_all(&sq)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from scalar `loss`. Returns one gradient per `wrt`
    /// entry; tensors unreachable from the loss get zeros. With
    /// `create_graph` the returned gradients are themselves differentiable.
    pub fn backward(
        &self,
        loss: &Tensor<E>,
        wrt: &[&Tensor<E>],
        create_graph: bool,
    ) -> Result<Vec<Tensor<E>>> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let grad_of = |grads: &HashMap<usize, Tensor<E>>, t: &Tensor<E>| -> Tensor<E> {
            let nid = match t.node() {
                Some(nr) if nr.graph == self.id => Some(nr.node),
                _ => self.leaves.borrow().get(&t.id()).copied(),
            };
            match nid.and_then(|id| grads.get(&id)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape().to_vec()),
            }
        };

        let root = match loss.node() {
            Some(nr) if nr.graph == self.id => nr.node,
            Some(_) => return Err(Error::contract("loss belongs to a different graph")),
            None => {
                // Loss not connected to this graph: all gradients are zero.
                return Ok(wrt.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect());
            }
        };

        let mut grads: HashMap<usize, Tensor<E>> = HashMap::new();
        grads.insert(root, Tensor::ones(loss.shape().to_vec()));

        let _mode = self.set_grad_mode(create_graph);
        for nid in (0..=root).rev() {
            let Some(g) = grads.get(&nid).cloned() else { continue };
            // Clone the record out so composition ops can re-borrow nodes.
            let (op, inputs, saved, out) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[nid];
                (node.op.clone(), node.inputs.clone(), node.saved.clone(), node.out.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(Option::is_some).collect();
            let contribs = self.op_backward(&op, &saved, &out, &g, &need)?;
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let (Some(j), Some(c)) = (inputs[slot], contrib) else { continue };
                let acc = match grads.remove(&j) {
                    Some(prev) => self.add(&prev, &c)?,
                    None => c,
                };
                grads.insert(j, acc);
            }
        }

        Ok(wrt.iter().map(|t| grad_of(&grads, t)).collect())
    }

    /// Reduce `g` to `target` by summing over broadcast axes.
    fn reduce_to(&self, g: &Tensor<E>, target: &[usize]) -> Result<Tensor<E>> {
        if g.shape() == target {
            return Ok(g.clone());
        }
        let axes: Vec<usize> = target
            .iter()
            .enumerate()
            .filter(|&(i, &d)| d == 1 && g.dim(i) != 1)
            .map(|(i, _)| i)
            .collect();
        self.sum_axes(g, &axes)
    }

    fn op_backward(
        &self,
        op: &Op,
        saved: &[Tensor<E>],
        out: &Tensor<E>,
        g: &Tensor<E>,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let res = match op {
            Op::Leaf => vec![],
            Op::Add => {
                let da = need[0].then(|| self.reduce_to(g, saved[0].shape())).transpose()?;
                let db = need[1].then(|| self.reduce_to(g, saved[1].shape())).transpose()?;
                vec![da, db]
            }
            Op::Sub => {
                let da = need[0].then(|| self.reduce_to(g, saved[0].shape())).transpose()?;
                let db = if need[1] {
                    Some(self.reduce_to(&self.neg(g)?, saved[1].shape())?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Mul => {
                let da = if need[0] {
                    Some(self.reduce_to(&self.mul(g, &saved[1])?, saved[0].shape())?)
                } else {
                    None
                };
                let db = if need[1] {
                    Some(self.reduce_to(&self.mul(g, &saved[0])?, saved[1].shape())?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Scale(c) => vec![need[0].then(|| self.scale(g, *c)).transpose()?],
            Op::AddScalar(_) => vec![need[0].then(|| Ok::<_, Error>(g.clone())).transpose()?],
            Op::Matmul => {
                let da = if need[0] {
                    Some(self.matmul(g, &self.transpose2d(&saved[1])?)?)
                } else {
                    None
                };
                let db = if need[1] {
                    Some(self.matmul(&self.transpose2d(&saved[0])?, g)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Transpose2d => vec![need[0].then(|| self.transpose2d(g)).transpose()?],
            Op::Conv2d { stride, ph, pw } => self.conv2d_backward(saved, g, *stride, *ph, *pw, need)?,
            Op::LeakyRelu { alpha } => {
                let da = if need[0] {
                    let a = E::from_f64(*alpha);
                    // The mask is constant w.r.t. differentiation.
                    let mask = saved[0].map(|v| if v >= E::zero() { E::one() } else { a });
                    Some(self.mul(g, &mask)?)
                } else {
                    None
                };
                vec![da]
            }
            Op::Softplus => {
                let da = if need[0] {
                    Some(self.mul(g, &self.sigmoid(&saved[0])?)?)
                } else {
                    None
                };
                vec![da]
            }
            Op::Sigmoid => {
                let da = if need[0] {
                    // y(1-y)
                    let one_minus = self.add_scalar(&self.neg(out)?, 1.0)?;
                    Some(self.mul(g, &self.mul(out, &one_minus)?)?)
                } else {
                    None
                };
                vec![da]
            }
            Op::Rsqrt => {
                let da = if need[0] {
                    // -0.5 · y³ · g
                    let y2 = self.mul(out, out)?;
                    let y3 = self.mul(&y2, out)?;
                    Some(self.scale(&self.mul(g, &y3)?, -0.5)?)
                } else {
                    None
                };
                vec![da]
            }
            Op::Sqrt => {
                let da = if need[0] {
                    // 0.5 · g / sqrt(x)
                    Some(self.scale(&self.mul(g, &self.rsqrt(&saved[0])?)?, 0.5)?)
                } else {
                    None
                };
                vec![da]
            }
            Op::SumAxes => {
                vec![need[0].then(|| self.broadcast_to(g, saved[0].shape().to_vec())).transpose()?]
            }
            Op::BroadcastTo => vec![need[0].then(|| self.reduce_to(g, saved[0].shape())).transpose()?],
            Op::Reshape => {
                vec![need[0].then(|| self.reshape(g, saved[0].shape().to_vec())).transpose()?]
            }
            Op::NnUp2 => vec![need[0].then(|| self.block_sum2(g)).transpose()?],
            Op::BlockSum2 => vec![need[0].then(|| self.nn_up2(g)).transpose()?],
            Op::Blur3 => vec![need[0].then(|| self.blur3_adjoint(g)).transpose()?],
            Op::Blur3Adjoint => vec![need[0].then(|| self.blur3(g)).transpose()?],
            Op::Dilate2 => vec![need[0].then(|| self.subsample_even(g)).transpose()?],
            Op::SubsampleEven => {
                vec![need[0]
                    .then(|| self.dilate2(g, saved[0].dim(2), saved[0].dim(3)))
                    .transpose()?]
            }
            Op::FlipHw => vec![need[0].then(|| self.flip_hw(g)).transpose()?],
            Op::Transpose01 => vec![need[0].then(|| self.transpose01(g)).transpose()?],
            Op::ConcatChannels => {
                let ca = saved[0].dim(1);
                let cb = saved[1].dim(1);
                let da = need[0].then(|| self.slice_channels(g, 0, ca)).transpose()?;
                let db = need[1].then(|| self.slice_channels(g, ca, ca + cb)).transpose()?;
                vec![da, db]
            }
            Op::SliceChannels { from } => {
                let da = if need[0] {
                    let x = &saved[0];
                    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let cs = out.dim(1);
                    let mut acc = g.clone();
                    if *from > 0 {
                        let zl = Tensor::zeros(vec![n, *from, h, w]);
                        acc = self.concat_channels(&zl, &acc)?;
                    }
                    if from + cs < c {
                        let zr = Tensor::zeros(vec![n, c - from - cs, h, w]);
                        acc = self.concat_channels(&acc, &zr)?;
                    }
                    Some(acc)
                } else {
                    None
                };
                vec![da]
            }
            Op::ConcatRows => {
                let ra = saved[0].dim(0);
                let rb = saved[1].dim(0);
                let da = need[0].then(|| self.slice_rows(g, 0, ra)).transpose()?;
                let db = need[1].then(|| self.slice_rows(g, ra, ra + rb)).transpose()?;
                vec![da, db]
            }
            Op::SliceRows { from } => {
                let da = if need[0] {
                    let x = &saved[0];
                    let rows = x.dim(0);
                    let rs = out.dim(0);
                    let tail_shape = |r: usize| {
                        let mut s = x.shape().to_vec();
                        s[0] = r;
                        s
                    };
                    let mut acc = g.clone();
                    if *from > 0 {
                        acc = self.concat_rows(&Tensor::zeros(tail_shape(*from)), &acc)?;
                    }
                    if from + rs < rows {
                        acc = self.concat_rows(&acc, &Tensor::zeros(tail_shape(rows - from - rs)))?;
                    }
                    Some(acc)
                } else {
                    None
                };
                vec![da]
            }
        };
        Ok(res)
    }

    /// Gradient of `loss` w.r.t. a single tensor; plain convenience wrapper.
    pub fn grad(&self, loss: &Tensor<E>, wrt: &Tensor<E>, create_graph: bool) -> Result<Tensor<E>> {
        Ok(self.backward(loss, &[wrt], create_graph)?.pop().unwrap())
    }

    /// Gradients of conv2d via equivalent convolutions, so they are
    /// themselves differentiable.
    fn conv2d_backward(
        &self,
        saved: &[Tensor<E>],
        g: &Tensor<E>,
        stride: usize,
        ph: usize,
        pw: usize,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, w) = (&saved[0], &saved[1]);
        let (kh, kw) = (w.dim(2), w.dim(3));
        // Stride-2 gradients reduce to stride-1 after zero-insertion.
        let g1 = if stride == 1 {
            g.clone()
        } else {
            self.dilate2(g, 2 * g.dim(2) - 1, 2 * g.dim(3) - 1)?
        };
        let dx = if need[0] {
            // Full correlation with the flipped, io-swapped kernel.
            let wt = self.transpose01(&self.flip_hw(w)?)?;
            Some(self.conv2d_raw(&g1, &wt, 1, kh - 1 - ph, kw - 1 - pw)?)
        } else {
            None
        };
        let dw = if need[1] {
            // dW = T01(conv(T01(x), T01(g1))) with the original padding.
            let xt = self.transpose01(x)?;
            let gt = self.transpose01(&g1)?;
            Some(self.transpose01(&self.conv2d_raw(&xt, &gt, 1, ph, pw)?)?)
        } else {
            None
        };
        Ok(vec![dx, dw])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, rel_err};
    use crate::oracles;
    use crate::rng::{stream_rng, streams};
    use rand::Rng;

    fn randn64(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), 1.0, rng)
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = Graph::<f32>::new();
        let x = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_overlap_counting() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::ones(vec![1, 1, 4, 4]);
        let w = Tensor::<f32>::ones(vec![1, 1, 3, 3]);
        let y = g.conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0); // corner sees a 2x2 window
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0); // interior sees the full kernel
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_matches_loop_oracle_f32_and_bitwise_f64() {
        let mut rng = stream_rng(11, streams::INIT);
        let x64 = randn64(&[2, 3, 8, 8], &mut rng);
        let w64 = randn64(&[4, 3, 3, 3], &mut rng);
        for (stride, pad) in [(1usize, 1usize), (1, 0), (2, 1)] {
            if kernels::conv_out_extent(8, 3, stride, pad).is_none() {
                continue;
            }
            let g = Graph::<f64>::new();
            let y = g.conv2d(&x64, &w64, stride, pad).unwrap();
            let r = oracles::conv2d_ref(x64.data(), 2, 3, 8, 8, w64.data(), 4, 3, 3, stride, pad);
            assert_eq!(y.data(), &r[..], "f64 conv must equal the loop oracle bitwise");

            let g32 = Graph::<f32>::new();
            let x32: Tensor<f32> = x64.cast();
            let w32: Tensor<f32> = w64.cast();
            let y32 = g32.conv2d(&x32, &w32, stride, pad).unwrap();
            let r32 =
                oracles::conv2d_ref(x32.data(), 2, 3, 8, 8, w32.data(), 4, 3, 3, stride, pad);
            for (a, b) in y32.data().iter().zip(&r32) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_is_error() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::ones(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::ones(vec![1, 3, 3, 3]);
        assert!(g.conv2d(&x, &w, 1, 1).is_err());
        let w_even = Tensor::<f32>::ones(vec![1, 2, 2, 2]);
        assert!(g.conv2d(&x, &w_even, 1, 0).is_err());
    }

    #[test]
    fn matmul_bias_examples() {
        let g = Graph::<f32>::new();
        // identity left factor
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::zeros(vec![2]);
        let y = g.matmul_bias(&eye, &w, &b).unwrap();
        assert_eq!(y.data(), w.data());

        // zero weight: every row equals the bias
        let x = Tensor::from_vec(vec![3, 2], vec![5.0, -1.0, 2.0, 0.5, 9.0, 3.0]).unwrap();
        let w0 = Tensor::<f32>::zeros(vec![2, 2]);
        let c = Tensor::from_vec(vec![2], vec![7.0, -2.0]).unwrap();
        let y = g.matmul_bias(&x, &w0, &c).unwrap();
        for row in 0..3 {
            assert_eq!(y.at(&[row, 0]), 7.0);
            assert_eq!(y.at(&[row, 1]), -2.0);
        }

        // random case against the triple-loop oracle
        let mut rng = stream_rng(3, streams::INIT);
        let a = Tensor::<f32>::randn(vec![3, 5], 1.0, &mut rng);
        let m = Tensor::<f32>::randn(vec![5, 2], 1.0, &mut rng);
        let bias = Tensor::<f32>::randn(vec![2], 1.0, &mut rng);
        let y = g.matmul_bias(&a, &m, &bias).unwrap();
        let r = oracles::matmul_ref(a.data(), m.data(), 3, 5, 2);
        for i in 0..3 {
            for j in 0..2 {
                let expect = r[i * 2 + j] + bias.data()[j];
                assert!((y.at(&[i, j]) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn leaky_relu_examples() {
        let g = Graph::<f32>::new();
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);

        let pos = Tensor::from_vec(vec![4], vec![0.0, 0.5, 1.0, 7.0]).unwrap();
        let y = g.leaky_relu(&pos, 0.2).unwrap();
        assert_eq!(y.data(), pos.data());

        assert!(g.leaky_relu(&x, 1.5).is_err());

        // gradient at x = -1 is alpha, against finite differences
        let mut rng = stream_rng(5, streams::INIT);
        let p = Tensor::from_vec(vec![1], vec![-1.0f64]).unwrap();
        let report = finite_diff_check(
            &[p],
            |g, ps| {
                let y = g.leaky_relu(&ps[0], 0.2)?;
                g.sum_all(&y)
            },
            1e-4,
            16,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
        assert!(rel_err(report.worst_analytic, 0.2) < 1e-9);
    }

    #[test]
    fn resample_examples() {
        let g = Graph::<f32>::new();
        // up on a single pixel: constant is preserved, sum quadruples
        let v = 1.7f32;
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![v]).unwrap();
        let up = g.resample2x(&x, Resample::Up).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 2]);
        let sum: f32 = up.data().iter().sum();
        assert!((sum - 4.0 * v).abs() < 1e-6);

        // down(up(constant)) == constant
        let c = Tensor::<f32>::full(vec![1, 2, 4, 4], 0.37);
        let down = g.resample2x(&g.resample2x(&c, Resample::Up).unwrap(), Resample::Down).unwrap();
        assert_eq!(down.shape(), c.shape());
        for (a, b) in down.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        // random maps against the explicit-kernel oracle
        let mut rng = stream_rng(9, streams::INIT);
        let x = Tensor::<f64>::randn(vec![2, 3, 6, 6], 1.0, &mut rng);
        let g64 = Graph::<f64>::new();
        let up = g64.resample2x(&x, Resample::Up).unwrap();
        let up_ref = oracles::resample_up_ref(x.data(), 6, 6, 6);
        for (a, b) in up.data().iter().zip(&up_ref) {
            assert!((a - b).abs() < 1e-12);
        }
        let down = g64.resample2x(&x, Resample::Down).unwrap();
        let down_ref = oracles::resample_down_ref(x.data(), 6, 6, 6);
        for (a, b) in down.data().iter().zip(&down_ref) {
            assert!((a - b).abs() < 1e-12);
        }

        // odd extents refuse to downsample
        let odd = Tensor::<f32>::ones(vec![1, 1, 5, 5]);
        assert!(g.resample2x(&odd, Resample::Down).is_err());
    }

    #[test]
    fn normalize_2nd_moment_examples() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::full(vec![1, 4], 2.0);
        let y = g.normalize_2nd_moment(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        let z = Tensor::<f32>::zeros(vec![2, 4]);
        let y = g.normalize_2nd_moment(&z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = stream_rng(2, streams::INIT);
        let r = Tensor::<f32>::randn(vec![3, 16], 1.0, &mut rng);
        let y = g.normalize_2nd_moment(&r).unwrap();
        for row in 0..3 {
            let ms: f32 =
                (0..16).map(|d| y.at(&[row, d]) * y.at(&[row, d])).sum::<f32>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_quadratic_and_unreachable() {
        let g = Graph::<f64>::new();
        let mut rng = stream_rng(4, streams::INIT);
        let x = randn64(&[5], &mut rng).with_grad();
        let p = randn64(&[3], &mut rng).with_grad();
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum_all(&sq).unwrap();
        let grads = g.backward(&loss, &[&x, &p], false).unwrap();
        for (gv, xv) in grads[0].data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
        // p does not feed the loss: zero gradient
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        // non-scalar loss is a contract violation
        assert!(g.backward(&sq, &[&x], false).is_err());
    }

    #[test]
    fn backward_sums_over_shared_consumer_paths() {
        // y = a*x (node u) ; loss = sum(u * x) + sum(u): x feeds two paths.
        // Hand-built oracle: loss = Σ a x² + Σ a x → dl/dx = 2 a x + a.
        let g = Graph::<f64>::new();
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.25, 2.0]).unwrap().with_grad();
        let a = Tensor::from_vec(vec![3], vec![3.0, 0.25, -0.5]).unwrap();
        let u = g.mul(&a, &x).unwrap();
        let t1 = g.sum_all(&g.mul(&u, &x).unwrap()).unwrap();
        let t2 = g.sum_all(&u).unwrap();
        let loss = g.add(&t1, &t2).unwrap();
        let grad = g.grad(&loss, &x, false).unwrap();
        for i in 0..3 {
            let expect = 2.0 * a.data()[i] * x.data()[i] + a.data()[i];
            assert!((grad.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // Every differentiable primitive, 10 seeds, h = 1e-4, f64.
        for seed in 0..10u64 {
            let mut rng = stream_rng(seed, streams::INIT);
            let x = randn64(&[2, 3, 6, 6], &mut rng);
            let w = randn64(&[4, 3, 3, 3], &mut rng);
            let m = randn64(&[4, 5], &mut rng);
            let k = randn64(&[5, 3], &mut rng);
            let b = randn64(&[3], &mut rng);
            let pos = m.map(|v| v.abs() + 0.5);

            let cases: Vec<(&str, Vec<Tensor<f64>>, BuildFn)> = vec![
                ("conv2d", vec![x.clone(), w.clone()], |g, ps| {
                    let y = g.conv2d(&ps[0], &ps[1], 1, 1)?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("matmul_bias", vec![m.clone(), k.clone(), b.clone()], |g, ps| {
                    let y = g.matmul_bias(&ps[0], &ps[1], &ps[2])?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("leaky_relu", vec![m.clone()], |g, ps| {
                    g.sum_all(&g.leaky_relu(&ps[0], 0.2)?)
                }),
                ("softplus", vec![m.clone()], |g, ps| g.sum_all(&g.softplus(&ps[0])?)),
                ("sigmoid", vec![m.clone()], |g, ps| {
                    let y = g.sigmoid(&ps[0])?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("rsqrt", vec![pos.clone()], |g, ps| g.sum_all(&g.rsqrt(&ps[0])?)),
                ("sqrt", vec![pos.clone()], |g, ps| g.sum_all(&g.sqrt(&ps[0])?)),
                ("resample_up", vec![x.clone()], |g, ps| {
                    let y = g.resample2x(&ps[0], Resample::Up)?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("resample_down", vec![x.clone()], |g, ps| {
                    let y = g.resample2x(&ps[0], Resample::Down)?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("normalize_2nd_moment", vec![m.clone()], |g, ps| {
                    let y = g.normalize_2nd_moment(&ps[0])?;
                    g.sum_all(&g.mul(&y, &y)?)
                }),
                ("sum_axes_broadcast", vec![x.clone()], |g, ps| {
                    let s = g.sum_axes(&ps[0], &[0, 2])?;
                    let e = g.broadcast_to(&s, ps[0].shape().to_vec())?;
                    g.sum_all(&g.mul(&e, &ps[0])?)
                }),
                ("concat_slice", vec![x.clone(), x.clone()], |g, ps| {
                    let c = g.concat_channels(&ps[0], &ps[1])?;
                    let s = g.slice_channels(&c, 1, 4)?;
                    g.sum_all(&g.mul(&s, &s)?)
                }),
                ("mix_mul_sub", vec![m.clone(), pos.clone()], |g, ps| {
                    let d = g.sub(&ps[0], &ps[1])?;
                    g.mean_all(&g.mul(&d, &d)?)
                }),
            ];
            for (name, params, build) in cases {
                let report =
                    finite_diff_check(&params, build, 1e-4, 64, 6, &mut rng).unwrap();
                assert!(
                    report.max_rel_err <= 1e-4,
                    "{name} seed {seed}: max rel err {} (analytic {}, numeric {})",
                    report.max_rel_err,
                    report.worst_analytic,
                    report.worst_numeric
                );
            }
        }
    }

    type BuildFn = fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

    #[test]
    fn stride2_conv_gradients() {
        // stride 2 requires exact geometry: H + 2p - k divisible by the stride
        let mut rng = stream_rng(21, streams::INIT);
        let x = randn64(&[1, 2, 7, 7], &mut rng);
        let w = randn64(&[3, 2, 3, 3], &mut rng);
        let report = finite_diff_check(
            &[x, w],
            |g, ps| {
                let y = g.conv2d(&ps[0], &ps[1], 2, 1)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            1e-4,
            512,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn double_backward_grad_norm() {
        // loss = |∇_x f|² for f = sum(conv(x,w)²) must itself differentiate
        // w.r.t. w; checked against finite differences over w.
        let mut rng = stream_rng(31, streams::INIT);
        let x0 = randn64(&[1, 2, 5, 5], &mut rng);
        let w0 = randn64(&[2, 2, 3, 3], &mut rng);
        let report = finite_diff_check(
            &[w0],
            move |g, ps| {
                let x = x0.detach().with_grad();
                let y = g.conv2d(&x, &ps[0], 1, 1)?;
                let act = g.leaky_relu(&y, 0.2)?;
                let f = g.sum_all(&g.mul(&act, &act)?)?;
                let gx = g.grad(&f, &x, true)?;
                g.sum_all(&g.mul(&gx, &gx)?)
            },
            1e-4,
            64,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-3, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut rng = stream_rng(77, streams::INIT);
            let g = Graph::<f32>::new();
            let x = Tensor::<f32>::randn(vec![4, 3, 16, 16], 1.0, &mut rng);
            let w = Tensor::<f32>::randn(vec![8, 3, 3, 3], 1.0, &mut rng);
            let y = g.conv2d(&x, &w, 1, 1).unwrap();
            let z = g.resample2x(&y, Resample::Down).unwrap();
            let a = g.leaky_relu(&z, 0.2).unwrap();
            g.sum_all(&a).unwrap().scalar_value()
        };
        let v1 = run();
        let v2 = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn cross_graph_use_is_rejected() {
        let g1 = Graph::<f32>::new();
        let g2 = Graph::<f32>::new();
        let x = Tensor::<f32>::ones(vec![2]).with_grad();
        let y = g1.mul(&x, &x).unwrap();
        assert!(g2.mul(&y, &y).is_err());
        // detached values migrate freely
        assert!(g2.mul(&y.detach(), &y.detach()).is_ok());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::full(vec![2], f32::MAX);
        let err = g.mul(&x, &x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn no_grad_scope_skips_recording() {
        let g = Graph::<f32>::new();
        let x = Tensor::<f32>::ones(vec![2]).with_grad();
        {
            let _ng = g.no_grad();
            let y = g.mul(&x, &x).unwrap();
            assert!(y.node().is_none());
        }
        let y = g.mul(&x, &x).unwrap();
        assert!(y.node().is_some());
    }
}
