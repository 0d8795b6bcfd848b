//! Dense row-major tensors over f32 or f64 elements.
//!
//! Tensors are immutable values: every operation returns a new tensor and the
//! underlying buffer is shared via `Arc`. A tensor optionally carries a handle
//! into the differentiation graph that produced it (see [`crate::graph`]).

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element type of a tensor. f32 is the training dtype; f64 exists for
/// gradient checking and the covariance/eigenvalue math in `metrics`.
pub trait Elem: num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a(m×k) · b(k×n) + beta * c`, all row-major contiguous.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    // f64 is the gradient-checking dtype, not the performance path. A plain
    // ascending-k loop keeps the accumulation order identical to the naive
    // reference convolution, which the oracle suite compares bit-for-bit.
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (j, cv) in crow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, &av) in arow.iter().enumerate() {
                    acc += av * b[p * n + j];
                }
                *cv = if alpha == 1.0 && beta == 0.0 { acc } else { alpha * acc + beta * *cv };
            }
        }
    }
}

/// Identity of a tensor *value*. Clones share the id; `detach` and every op
/// output get a fresh one. The graph keys leaf registrations on this.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Handle of the graph node that produced a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeRef {
    pub graph: u64,
    pub node: usize,
}

#[derive(Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    id: TensorId,
    node: Option<NodeRef>,
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, id: fresh_id(), node: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![E::zero(); numel]),
            requires_grad: false,
            id: fresh_id(),
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: E) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; numel]), requires_grad: false, id: fresh_id(), node: None }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(v: E) -> Self {
        Self::full(Vec::new(), v)
    }

    /// Standard-normal fill, optionally scaled (`std`).
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                E::from_f64(v * std)
            })
            .collect();
        Tensor { shape, data: Arc::new(data), requires_grad: false, id: fresh_id(), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn set_node(&mut self, node: NodeRef) {
        self.node = Some(node);
    }

    pub(crate) fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark this tensor as a differentiation leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same values, cut loose from any graph.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            id: fresh_id(),
            node: None,
        }
    }

    /// New value, same id: used when a parameter is updated in place by the
    /// optimizer but should keep its registration identity is *not* wanted —
    /// so this deliberately refreshes the id as well.
    pub fn replace_data(&mut self, data: Vec<E>) {
        debug_assert_eq!(data.len(), self.numel());
        self.data = Arc::new(data);
        self.id = fresh_id();
        self.node = None;
    }

    pub fn scalar_value(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: false,
            id: fresh_id(),
            node: None,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: false,
            id: fresh_id(),
            node: None,
        })
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: false,
            id: fresh_id(),
            node: None,
        }
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            off = off * self.shape[i] + d;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> E {
        self.data[self.offset(idx)]
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE.name(), self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_error() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::<f32>::scalar(3.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.scalar_value(), 3.5);
    }

    #[test]
    fn clone_shares_id_detach_does_not() {
        let t = Tensor::<f32>::zeros(vec![2, 2]);
        assert_eq!(t.clone().id(), t.id());
        assert_ne!(t.detach().id(), t.id());
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
