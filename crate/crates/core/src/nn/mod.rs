//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Feature maps are stored channel-major, (c, b, h, w), so convolutions become
//! one GEMM over the whole batch and batch norm reduces over contiguous planes.

mod gemm;
mod layers;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use gemm::{gemm, Strides};
pub use layers::{
    AvgPool2x, BatchNorm2d, ChannelMask, Conv2d, GlobalAvgPool, Linear, Relu, ResBlock, Sigmoid, Silu,
    Upsample2x,
};

/// Floating-point element type of the engine (f32 for training, f64 for checks).
pub trait Scalar:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + DivAssign + Sum
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A * B + beta * C with explicit row/column strides.
    ///
    /// # Safety
    /// Every strided access must stay inside the backing buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which learning rate a parameter is optimized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    ShiftMlp,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    pub group: ParamGroup,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<F>, decay: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![F::zero(); n],
            decay,
            group: ParamGroup::Main,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self::new(name, shape, vec![F::zero(); shape.iter().product()], decay)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Non-learnable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
}

/// Uniform access to the tensors owned by a layer or network.
pub trait Module<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;
    fn buffers(&self) -> Vec<&Buffer<F>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Activations laid out as (c, b, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            b,
            h,
            w,
            data: vec![F::zero(); c * b * h * w],
        }
    }

    /// A (features, batch) matrix, i.e. h = w = 1.
    pub fn vectors(c: usize, b: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * b);
        Self { c, b, h: 1, w: 1, data }
    }

    /// Elements per channel plane (b * h * w).
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Value of sample `bi` in a (c, b) matrix.
    pub fn at(&self, c: usize, bi: usize) -> F {
        self.data[c * self.b + bi]
    }
}
