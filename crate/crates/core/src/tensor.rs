//! Dense NCHW tensors and the scalar trait shared by every numeric kernel.
//!
//! Networks train in `f32`. The loss stack and the layer kernels are generic
//! so gradient checks can run the identical code path in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{shape_err, Result};

/// Scalar element type with a matrix-multiply kernel.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_float {
    ($t:ty, $kernel:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// A 4-D tensor in `[batch, channels, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Float = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(shape_err!(
                "tensor of shape {shape:?} needs {want} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self, n: usize) -> &[T] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected shape {shape:?}, got {:?}", self.shape));
        }
        Ok(())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.item_len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(shape_err!(
                    "stack: {:?} does not match {:?}",
                    t.shape,
                    first.shape
                ));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copies batch item `n` out as a single-item tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self {
            shape: [1, c, h, w],
            data: self.item(n).to_vec(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!(
            "concat: {:?} and {:?} differ outside channels",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(a.item(i));
        out.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], out)
}

/// Splits a channel-concatenated tensor back into its two parts.
pub fn split_channels<T: Float>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut a = Vec::with_capacity(n * first * hw);
    let mut b = Vec::with_capacity(n * (c - first) * hw);
    for i in 0..n {
        let item = t.item(i);
        a.extend_from_slice(&item[..first * hw]);
        b.extend_from_slice(&item[first * hw..]);
    }
    (
        Tensor {
            shape: [n, first, h, w],
            data: a,
        },
        Tensor {
            shape: [n, c - first, h, w],
            data: b,
        },
    )
}
