//! Dense row-major tensors.
//!
//! Grids are laid out channel-first, `[C, D?, H, W]`; the trailing axes are
//! spatial. A [`Tensor`] is a plain value: recording it for differentiation is
//! the job of the [`Tape`](super::Tape).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use sha2::{Digest, Sha256};

use super::rng::Rng;
use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks
/// re-run the same graph in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// How to populate a new tensor.
pub enum Fill<'a, T> {
    Constant(T),
    Uniform { lo: T, hi: T, rng: &'a mut Rng },
    Values(Vec<T>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("rank-0 shape".into()));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::Shape(format!("zero extent on axis {axis} of {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], fill: Fill<'_, T>) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Constant(v) => vec![v; len],
            Fill::Uniform { lo, hi, rng } => {
                if !(lo < hi) {
                    return Err(Error::InvalidArgument(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let (lo, hi) = (lo.f64(), hi.f64());
                (0..len).map(|_| T::of(rng.uniform_range(lo, hi))).collect()
            }
            Fill::Values(values) => {
                if values.len() != len {
                    return Err(Error::Shape(format!(
                        "{} values for shape {shape:?} ({len} elements)",
                        values.len()
                    )));
                }
                values
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Fill::Constant(T::zero()))
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(shape, Fill::Constant(value))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new(shape, Fill::Values(data))
    }

    pub fn uniform(shape: &[usize], lo: T, hi: T, rng: &mut Rng) -> Result<Self> {
        Self::new(shape, Fill::Uniform { lo, hi, rng })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
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

    /// Leading extent, read as the channel count for grids.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extents, read as the spatial shape for grids.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Elements per channel.
    pub fn cells(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    /// Little-endian byte image of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 over shape and payload bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for &e in &self.shape {
            hasher.update((e as u64).to_le_bytes());
        }
        hasher.update(self.to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_zero_fill() {
        let t = Tensor::<f32>::new(&[2, 2], Fill::Constant(0.0)).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn values_fill_is_identity() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn uniform_fill_reproducible_bitwise() {
        let a = Tensor::<f32>::uniform(&[4], -0.1, 0.1, &mut Rng::new(7, 0)).unwrap();
        let b = Tensor::<f32>::uniform(&[4], -0.1, 0.1, &mut Rng::new(7, 0)).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert!(a.data().iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn rejects_bad_shapes_and_lengths() {
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::<f32>::uniform(&[2], 0.5, 0.5, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn digest_depends_on_shape() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[3, 2]).unwrap();
        assert_ne!(a.digest(), b.digest());
    }
}
