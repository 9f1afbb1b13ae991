//! Dense tensors, real FFTs and the reverse-mode operation graph.
//!
//! Layout convention everywhere: `[batch, channels, spatial...]`, row-major,
//! with one or two spatial axes.

pub mod fft;
pub mod graph;
pub mod gradcheck;
pub mod ops;

pub use fft::{irfft, irfft_adjoint, rfft, rfft_adjoint};
pub use graph::{backward, Graph, Var};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Dense real tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(dim_err!(
                "gradient of length {} for tensor of {} values",
                g.len(),
                self.data.len()
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copy of sample `b` along the leading axis, keeping a unit batch axis.
    pub fn sample(&self, b: usize) -> Self {
        let per = self.data.len() / self.shape[0].max(1);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Stacks unit-batch tensors along the leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("cannot stack zero tensors"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(dim_err!("stack of {:?} and {:?}", first.shape, p.shape));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Complex tensor stored as two real buffers of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T: Scalar = f64> {
    pub shape: Vec<usize>,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
        }
    }

    pub fn new(shape: Vec<usize>, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(dim_err!(
                "complex shape {:?} needs {} values, got re {} / im {}",
                shape,
                n,
                re.len(),
                im.len()
            ));
        }
        Ok(Self { shape, re, im })
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }
}

/// Splits `[B, C, spatial...]` into `(B, C, spatial)`.
pub fn split_bcs(shape: &[usize]) -> Result<(usize, usize, &[usize])> {
    if shape.len() < 3 || shape.len() > 4 {
        return Err(dim_err!(
            "expected [batch, channels, spatial..] with 1 or 2 spatial axes, got {:?}",
            shape
        ));
    }
    Ok((shape[0], shape[1], &shape[2..]))
}
