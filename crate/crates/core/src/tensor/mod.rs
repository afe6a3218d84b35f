//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major contiguous arrays over an element type implementing
//! [`Scalar`] (`f32` for training, `f64` for finite-difference oracles).
//! Differentiable computation runs through a [`Tape`] arena; free-standing
//! tensors are plain value containers used for data, noise, and perturbation
//! arithmetic outside the graph.

mod tape;

pub mod io;

pub use tape::{input_gradient, NodeId, Tape};

use rand::Rng;
use thiserror::Error;

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite_scalar(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_finite_scalar(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({msg})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("noise bound must be nonnegative, got {bound}")]
    NegativeBound { bound: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Dense n-dimensional array. `grad` is populated by [`Tape::backward`] for
/// nodes with `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<T>> {
        &mut self.grad
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_scalar())
    }

    /// Elementwise convex combination `lam * self + (1 - lam) * other`.
    pub fn lerp(&self, other: &Tensor<T>, lam: T) -> Result<Tensor<T>, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "lerp",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let inv = T::ONE - lam;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| lam * a + inv * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn linf_distance(&self, other: &Tensor<T>) -> Result<T, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "linf_distance",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut m = T::ZERO;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            m = m.maximum((a - b).abs());
        }
        Ok(m)
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v > T::ZERO {
                T::ONE
            } else if v < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor {
        shape: t.shape().to_vec(),
        data,
        requires_grad: false,
        grad: None,
    }
}

/// I.i.d. uniform noise in `[-bound, bound]` per element.
pub fn sample_linf_noise<T: Scalar, R: Rng>(
    shape: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    if bound < 0.0 {
        return Err(TensorError::NegativeBound { bound });
    }
    let n: usize = shape.iter().product();
    if bound == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: false,
        grad: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn sign_maps_to_unit_values() {
        let t = Tensor::from_vec(&[3], vec![0.5f32, -0.2, 0.0]).unwrap();
        assert_eq!(sign(&t).data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn sign_of_zero_tensor_is_zero() {
        let t = Tensor::<f64>::zeros(&[4]);
        assert!(sign(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = sample_linf_noise::<f64, _>(&[32], 1.0, &mut rng).unwrap();
        let s1 = sign(&t);
        let s2 = sign(&s1);
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn noise_zero_bound_is_zero_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_linf_noise::<f32, _>(&[5, 5], 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_linf_noise::<f32, _>(&[1000], 0.1, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v.abs() <= 0.1));
    }

    #[test]
    fn noise_negative_bound_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_linf_noise::<f32, _>(&[2], -0.5, &mut rng).unwrap_err();
        assert!(matches!(err, TensorError::NegativeBound { .. }));
    }

    #[test]
    fn noise_is_deterministic_for_fixed_seed() {
        let a = sample_linf_noise::<f32, _>(&[2], 0.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_linf_noise::<f32, _>(&[2], 0.3, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        // Golden values frozen from the first run; the contract is that a
        // reseeded rng reproduces them bit for bit.
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), &[0.109137714, 0.27016523]);
    }

    #[test]
    fn lerp_is_convex_combination() {
        let a = Tensor::from_vec(&[1], vec![0.8f32]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.4f32]).unwrap();
        let m = a.lerp(&b, 0.25).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-7);
    }
}
