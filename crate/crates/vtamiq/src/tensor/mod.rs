//! Minimal differentiable tensor arithmetic.
//!
//! Everything the model needs is built from a flat-buffer [`Tensor`] with a
//! selectable 32/64-bit element type, a reverse-mode [`Tape`](tape::Tape),
//! and a [`ParameterStore`](params::ParameterStore) holding named trainable
//! values. A finite-difference oracle ([`gradcheck`]) is the correctness
//! anchor for the whole stack.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod tape;

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Element width tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type for all model math. Implemented for `f32`
/// (default training precision) and `f64` (verification suites).
pub trait Scalar:
    Float + Sum + Send + Sync + fmt::Debug + fmt::Display + fmt::LowerExp + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// N-dimensional numeric array over a shared flat buffer.
///
/// Tensors are immutable after creation; cloning is cheap (buffer is
/// reference-counted), so frozen-parameter inference can share tensors
/// across threads freely.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&F> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor{{shape: {:?}, data: {:?}{}}}",
            self.shape,
            preview,
            if self.data.len() > 8 { ", .." } else { "" }
        )
    }
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking `product(shape) == data.len()` and that all
    /// dimensions are positive.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor_new",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor_new",
                shape,
                reason: format!("buffer has {} elements, shape needs {}", data.len(), numel),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![F::zero(); numel]).expect("valid zero tensor")
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid filled tensor")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self::new(vec![1], vec![value]).expect("valid scalar tensor")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self::new(shape.to_vec(), data).expect("valid generated tensor")
    }

    /// Truncated-normal initialization (resampling outside two standard
    /// deviations), the standard transformer weight init.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                loop {
                    // Box-Muller keeps us independent of rand_distr.
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    if z.abs() <= 2.0 {
                        return F::from_f64(z * std);
                    }
                }
            })
            .collect();
        Self::new(shape.to_vec(), data).expect("valid random tensor")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// Reinterprets the buffer under a new shape without copying.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} elements", self.numel()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| F::from_f64(v)).collect(),
        )
    }

    /// Element access by multi-dimensional index. Row-major layout.
    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }
}

/// Seeds a counter-based RNG from a master seed plus a stream of tags, so
/// per-(image, epoch, run) streams are reproducible and independent.
pub fn derive_rng(master: u64, tags: &[u64]) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    for (i, &t) in tags.iter().enumerate() {
        let mixed = t.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ ((i as u64) << 56);
        let off = 8 + (i % 3) * 8;
        let mut chunk = [0u8; 8];
        chunk.copy_from_slice(&seed[off..off + 8]);
        let cur = u64::from_le_bytes(chunk) ^ mixed;
        seed[off..off + 8].copy_from_slice(&cur.to_le_bytes());
    }
    rand_chacha::ChaCha8Rng::from_seed(seed)
}

/// FNV-1a hash of a byte string. Used where a stable, process-independent
/// key is needed (per-image sampling streams, order-independent reductions).
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_buffer_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn new_rejects_zero_dimension() {
        let err = Tensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape { .. }));
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.shape(), &[3, 2]);
    }

    #[test]
    fn at_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }

    #[test]
    fn derive_rng_is_deterministic_and_tag_sensitive() {
        use rand::Rng;
        let a: f64 = derive_rng(7, &[1, 2]).random();
        let b: f64 = derive_rng(7, &[1, 2]).random();
        let c: f64 = derive_rng(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = derive_rng(3, &[]);
        let t = Tensor::<f64>::trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
