//! Dense tensors, stable softmax, cross-entropy, clipped SGD and a
//! central-difference gradient checker.
//!
//! Everything is generic over [`Scalar`], which is implemented for `f32`
//! (standard precision, used for training and checkpoints) and `f64` (high
//! precision, used whenever gradients are checked numerically).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumCast};
use thiserror::Error;

/// Sum-to-one tolerance for probability vectors in standard precision.
pub const STANDARD_SIMPLEX_TOL: f64 = 1e-5;
/// Sum-to-one tolerance for probability vectors in high precision.
pub const HIGH_SIMPLEX_TOL: f64 = 1e-9;
/// Lower clamp applied to a probability before taking its log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Default elementwise gradient clip.
pub const DEFAULT_CLIP: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("target {target} out of range for dimension {dim}")]
    TargetOutOfRange { target: usize, dim: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLearningRate(f64),
    #[error("clip must be positive, got {0}")]
    NonPositiveClip(f64),
    #[error("finite-difference epsilon {0} outside [1e-6, 1e-3]")]
    InvalidEpsilon(f64),
    #[error("loss function returned a non-finite value")]
    NonFiniteLoss,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Standard,
    High,
}

impl Precision {
    pub fn simplex_tolerance(self) -> f64 {
        match self {
            Precision::Standard => STANDARD_SIMPLEX_TOL,
            Precision::High => HIGH_SIMPLEX_TOL,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + NumCast + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Standard;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::High;
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(NumericsError::DataLength {
                dims: dims.to_vec(),
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Number of rows of a rank-2 tensor (the single extent of a rank-1 one).
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.dims.len() >= 2 {
            self.dims[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// `out = self · x` for a rank-2 tensor.
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols());
        debug_assert_eq!(out.len(), self.rows());
        let c = self.cols();
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(c)) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows()];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += selfᵀ · y` for a rank-2 tensor.
    pub fn matvec_t_acc(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows());
        debug_assert_eq!(out.len(), self.cols());
        let c = self.cols();
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(c)) {
            if yi == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + yi * w;
            }
        }
    }

    /// `self += a ⊗ b` for a rank-2 tensor.
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows());
        debug_assert_eq!(b.len(), self.cols());
        let c = self.cols();
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(c)) {
            if ai == T::zero() {
                continue;
            }
            for (w, &bj) in row.iter_mut().zip(b) {
                *w = *w + ai * bj;
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// A probability distribution over a finite index set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> ProbVector<T> {
    /// Wraps already-normalized values, checking the simplex invariant at
    /// the tolerance of `T`'s precision.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(NumericsError::NonFinite(i));
        }
        let sum: f64 = values.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > T::PRECISION.simplex_tolerance() {
            return Err(NumericsError::NonFinite(values.len()));
        }
        Ok(ProbVector { values })
    }

    pub fn uniform(dim: usize) -> Self {
        let p = T::one() / T::from_f64(dim as f64);
        ProbVector {
            values: vec![p; dim],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize) -> T {
        self.values[i]
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

pub(crate) fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<ProbVector<T>> {
    if v.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite(i));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector { values: out })
}

/// Softmax over finite logits, in place. Callers guarantee finiteness.
pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// `-ln(pred[target])`, with the probability clamped below at [`LOG_CLAMP`].
pub fn cross_entropy<T: Scalar>(pred: &ProbVector<T>, target: usize) -> Result<T> {
    if target >= pred.dimension() {
        return Err(NumericsError::TargetOutOfRange {
            target,
            dim: pred.dimension(),
        });
    }
    Ok(clamped_nll(pred.values[target]))
}

pub(crate) fn clamped_nll<T: Scalar>(p: T) -> T {
    -(p.max(T::from_f64(LOG_CLAMP))).ln()
}

/// Returns `param - lr * clip(grad)`, with the gradient clipped elementwise
/// to `[-clip, clip]`.
pub fn sgd_step<T: Scalar>(param: &Tensor<T>, grad: &Tensor<T>, lr: f64, clip: f64) -> Result<Tensor<T>> {
    let mut out = param.clone();
    sgd_step_in_place(&mut out, grad, lr, clip)?;
    Ok(out)
}

pub fn sgd_step_in_place<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: f64,
    clip: f64,
) -> Result<()> {
    if param.dims != grad.dims {
        return Err(NumericsError::DimsMismatch {
            expected: param.dims.clone(),
            found: grad.dims.clone(),
        });
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(NumericsError::NonPositiveLearningRate(lr));
    }
    if clip.is_nan() || clip <= 0.0 {
        return Err(NumericsError::NonPositiveClip(clip));
    }
    let lr = T::from_f64(lr);
    let clip = T::from_f64(clip);
    for (p, &g) in param.data.iter_mut().zip(&grad.data) {
        *p = *p - lr * g.max(-clip).min(clip);
    }
    Ok(())
}

/// Largest relative disagreement between `analytic_grads` and central
/// differences of `loss_fn`, taken over every scalar in `params`.
///
/// The relative error of one scalar is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[Tensor<f64>],
    analytic_grads: &[Tensor<f64>],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(NumericsError::InvalidEpsilon(eps));
    }
    if params.len() != analytic_grads.len() {
        return Err(NumericsError::DimsMismatch {
            expected: vec![params.len()],
            found: vec![analytic_grads.len()],
        });
    }
    for (p, g) in params.iter().zip(analytic_grads) {
        if p.dims != g.dims {
            return Err(NumericsError::DimsMismatch {
                expected: p.dims.clone(),
                found: g.dims.clone(),
            });
        }
    }
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data[i];
            work[t].data[i] = orig + eps;
            let plus = loss_fn(&work);
            work[t].data[i] = orig - eps;
            let minus = loss_fn(&work);
            work[t].data[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFiniteLoss);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = analytic_grads[t].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
