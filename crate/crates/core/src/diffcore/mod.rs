//! Minimal reverse-mode autodiff: dense arrays, a Wengert tape of matrix
//! operations, and finite-difference gradient checking.
//!
//! Everything is generic over [`Scalar`] so the same graph runs in f32 for
//! training and f64 for gradient verification.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point element type with a strided GEMM kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Shorthand for converting an f64 constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("representable")
    }

    /// C <- alpha*A*B + beta*C with explicit row/col strides, row-major data.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn uniform01<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn uniform01<R: Rng>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn uniform01<R: Rng>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Dense row-major array. At most two axes; a 1-D shape is treated as one row.
#[derive(Clone, Debug)]
pub struct Array<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Array<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "array rank must be 1 or 2, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![S::zero(); numel]).expect("consistent")
    }

    /// Normal(0, std) draws. Sampling happens in f64 so the stream of values
    /// is identical across precisions for a given rng state.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| S::of(dist.sample(rng))).collect();
        Self::from_vec(shape, data).expect("consistent")
    }

    /// Uniform(-bound, bound) draws, sampled in f64.
    pub fn rand_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| S::of(dist.sample(rng))).collect();
        Self::from_vec(shape, data).expect("consistent")
    }

    /// Mark as trainable.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) with 1-D data viewed as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn convert<T: Scalar>(&self) -> Array<T> {
        let data = self.data.iter().map(|&v| T::of(v.to_f64_lossy())).collect();
        let mut out = Array::<T>::from_vec(&self.shape, data).expect("consistent");
        out.requires_grad = self.requires_grad;
        out
    }
}
