//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! The engine covers exactly the layer set the forest-structure network
//! needs: (grouped) 2-D convolution with zero padding, batch normalization,
//! the pointwise activations ReLU / exp / sigmoid, addition, channel
//! concatenation and slicing, and the masked heteroscedastic Gaussian loss.
//! Everything is generic over [`Scalar`], so the same graph runs in `f32`
//! for training and in `f64` for gradient verification.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

pub use graph::{BatchNormMode, Graph, GradStore, ParamId, ParamStore, RunningStats, Var};

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + Debug + Default + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands with
    /// explicit strides.
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
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
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
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the asserts above bound every index the kernel touches
                // for non-negative strides, which is all this crate ever passes.
                unsafe {
                    $gemm(
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
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(B, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 4-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            shape: vec![b, len, h, w],
            data,
        })
    }

    /// Channel-axis concatenation of 4-D tensors with equal `B, H, W`.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let base = bi * pc * plane;
                data.extend_from_slice(&p.data[base..base + pc * plane]);
            }
        }
        Ok(Self {
            shape: vec![b, total, h, w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::scalar(1.5).len(), 1);
    }

    #[test]
    fn concat_shape_rule() {
        let a = Tensor::<f32>::zeros(&[2, 12, 3, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 16, 3, 3]);
        let bad = Tensor::<f32>::zeros(&[2, 4, 2, 3]);
        assert!(Tensor::concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 1.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = 1.0 + (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn concat_then_slice_recovers(ca in 1usize..5, cb in 1usize..5, seed in 0u64..1000) {
            let a = Tensor::<f64>::from_fn(&[2, ca, 3, 2], |i| (i as f64 + seed as f64).sin());
            let b = Tensor::<f64>::from_fn(&[2, cb, 3, 2], |i| (i as f64 * 0.7 + seed as f64).cos());
            let c = Tensor::concat_channels(&[&a, &b]).unwrap();
            proptest::prop_assert_eq!(c.slice_channels(0, ca).unwrap(), a);
            proptest::prop_assert_eq!(c.slice_channels(ca, cb).unwrap(), b);
        }
    }
}
