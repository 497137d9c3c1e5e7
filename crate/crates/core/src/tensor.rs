//! Dense storage shared by the network, losses and metrics.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type for network parameters and activations.
///
/// Training runs in `f32`; gradient checks instantiate the same network in
/// `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`,
    /// where `a_t` / `b_t` read the operand as transposed storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths were checked against the strides above.
                unsafe {
                    $f(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A batch × channels × height × width grid stored contiguously in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::default(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "grid {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice holding batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Gathers batch items in the given order.
    pub fn select(&self, items: &[usize]) -> Self {
        let len = self.dims[1] * self.dims[2] * self.dims[3];
        let mut data = Vec::with_capacity(items.len() * len);
        for &i in items {
            data.extend_from_slice(self.item(i));
        }
        Self {
            dims: [items.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    /// Stacks batches with equal per-item shape.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        let inner = &first.dims[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.dims[1..] != inner {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} onto {:?}",
                    p.dims, first.dims
                )));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: [n, inner[0], inner[1], inner[2]],
            data,
        })
    }
}

impl<T: Real> Tensor4<T> {
    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel scalar field over a batch: batch × height × width.
///
/// Carries both uncertainty maps and loss weight maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl PixelMap {
    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "pixel map {dims:?} given {} values",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> f64 {
        self.values[(n * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.dims[1] * self.dims[2];
        &self.values[n * len..(n + 1) * len]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn select(&self, items: &[usize]) -> Self {
        let len = self.dims[1] * self.dims[2];
        let mut values = Vec::with_capacity(items.len() * len);
        for &i in items {
            values.extend_from_slice(self.item(i));
        }
        Self {
            dims: [items.len(), self.dims[1], self.dims[2]],
            values,
        }
    }
}

/// Label value marking a pixel without annotation.
pub const UNLABELED: u8 = 255;

/// Per-pixel integer classes, batch × height × width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn from_vec(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "label mask {dims:?} given {} labels",
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn unlabeled(dims: [usize; 3]) -> Self {
        Self {
            dims,
            labels: vec![UNLABELED; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.labels[(n * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn item(&self, n: usize) -> &[u8] {
        let len = self.dims[1] * self.dims[2];
        &self.labels[n * len..(n + 1) * len]
    }

    pub fn select(&self, items: &[usize]) -> Self {
        let len = self.dims[1] * self.dims[2];
        let mut labels = Vec::with_capacity(items.len() * len);
        for &i in items {
            labels.extend_from_slice(self.item(i));
        }
        Self {
            dims: [items.len(), self.dims[1], self.dims[2]],
            labels,
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        let mut labels = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(Error::Dimension("label masks differ in size".into()));
            }
            n += p.dims[0];
            labels.extend_from_slice(&p.labels);
        }
        Ok(Self {
            dims: [n, first.dims[1], first.dims[2]],
            labels,
        })
    }
}

/// Per-pixel uncertainty in nats.
pub type UncertaintyMap = PixelMap;
/// Per-pixel loss weights.
pub type WeightMap = PixelMap;
