use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use super::NdError;

/// Scalar element type of a [`Tensor`].
///
/// Implemented for `f64` (gradient-check mode) and `f32` (training mode).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint headers.
    const DTYPE: &'static str;
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    /// `c = alpha * a @ b + beta * c` on row-major buffers, with explicit
    /// row/column strides so transposed views need no copy.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

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
                // SAFETY: every call site in `ops` derives m/k/n and the
                // strides from the shapes of the tensors owning these
                // buffers, so all addressed elements are in bounds.
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
                    )
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major array. Extents are all positive and
/// `shape.iter().product() == data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, NdError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NdError::BadShape {
                shape: shape.to_vec(),
                reason: "extents must be positive",
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NdError::BadShape {
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("valid shape")
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NdError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, NdError> {
        self.expect_same_shape("zip", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, NdError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NdError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self, NdError> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, NdError> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<(), NdError> {
        if self.shape != other.shape {
            return Err(NdError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Extents of a rank-4 `[B, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), NdError> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(NdError::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Slice `[index]` of the leading axis, as a tensor with that axis set to 1.
    pub fn batch_item(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Concatenate along the leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self, NdError> {
        let first = parts.first().ok_or(NdError::Empty { op: "stack" })?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut lead = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(NdError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    /// Repeat the whole tensor `times` along the leading axis.
    pub fn repeat_batch(&self, times: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[0] *= times;
        let mut data = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self { shape, data }
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| -(i as f32));
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1), b);
    }

    #[test]
    fn le_encoding_round_trips() {
        let mut buf = Vec::new();
        (-1.25e-3f64).write_le(&mut buf);
        3.5f32.write_le(&mut buf);
        assert_eq!(buf.len(), 12);
        assert_eq!(f64::read_le(&buf[..8]), -1.25e-3);
        assert_eq!(f32::read_le(&buf[8..]), 3.5);
    }
}
