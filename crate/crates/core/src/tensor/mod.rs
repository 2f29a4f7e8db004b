//! Dense f64 tensors, the fixed layer vocabulary used by the classifiers and
//! the segmenter, and a small reverse-mode engine over a sequential graph.

mod gradcheck;
mod graph;
mod layers;
mod optim;

pub use gradcheck::{finite_diff_check, GradCheckReport, MAX_GRADCHECK_PARAMS};
pub use graph::{ModelGraph, OutputKind};
pub use layers::{conv2d_forward, Conv2d, Dense, Layer, ResidualBlock};
pub use optim::{
    cross_entropy, pixel_cross_entropy, sgd_step, softmax_rows, DEFAULT_LEARNING_RATE,
};

#[cfg(test)]
pub(crate) use layers::fault;

use rand::Rng;

use crate::error::{shape_err, Result};

/// Row-major tensor of 64-bit floats with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Removes and returns the gradient buffer (zeros if none was present).
    pub(crate) fn take_grad(&mut self) -> Vec<f64> {
        let n = self.data.len();
        self.grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    /// Elements per entry of the leading (batch) dimension.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!(
                    "stack of {:?} with {:?}",
                    first.shape,
                    t.shape
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major matrices.
///
/// `op(a)` is `m x k`; when `a_t` is set `a` is stored as `k x m`.
/// Likewise `op(b)` is `k x n`, stored `n x k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the stated dimensions
    // and strides never step outside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
