//! Dense `C×D×H×W` float grids used for all network computation.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor4`]. Training and inference use
/// `f32`; `f64` exists for gradient verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Debug + Send + Sync + 'static
{
    /// Convert from `f64`, rounding to nearest.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// `C ← C + A·B` for an `m×k` matrix `A` and a `k×n` matrix `B`, all
    /// given as pointers with row and column strides in elements.
    ///
    /// # Safety
    /// Every addressed element must lie inside a live allocation, and `C`
    /// must not alias `A`, `B` or memory written concurrently.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c, rsc, csc);
    }
}

/// Spatial extent `(depth, height, width)`, z-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Dims {
            depth,
            height,
            width,
        }
    }

    pub const fn cube(edge: usize) -> Self {
        Dims::new(edge, edge, edge)
    }

    pub const fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub const fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    pub fn scaled(&self, f: usize) -> Self {
        Dims::new(self.depth * f, self.height * f, self.width * f)
    }

    pub fn min_edge(&self) -> usize {
        self.depth.min(self.height).min(self.width)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub channels: usize,
    pub spatial: Dims,
}

impl Shape4 {
    pub const fn new(channels: usize, spatial: Dims) -> Self {
        Shape4 { channels, spatial }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.spatial.len()
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.channels, self.spatial)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.channels == 0 || shape.spatial.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "degenerate tensor shape {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn spatial(&self) -> Dims {
        self.shape.spatial
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

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.spatial.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[c * self.shape.spatial.len() + self.shape.spatial.index(z, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Copy the sub-box `[start, start + size)` of every channel.
    pub fn crop(&self, start: [usize; 3], size: Dims) -> Tensor4<T> {
        let src = self.shape.spatial;
        debug_assert!(start[0] + size.depth <= src.depth);
        debug_assert!(start[1] + size.height <= src.height);
        debug_assert!(start[2] + size.width <= src.width);
        let mut data = Vec::with_capacity(self.shape.channels * size.len());
        for c in 0..self.shape.channels {
            let chan = self.channel(c);
            for z in 0..size.depth {
                for y in 0..size.height {
                    let off = src.index(start[0] + z, start[1] + y, start[2]);
                    data.extend_from_slice(&chan[off..off + size.width]);
                }
            }
        }
        Tensor4 {
            shape: Shape4::new(self.shape.channels, size),
            data,
        }
    }

    /// Write the sub-box of `src` beginning at `src_start` with extent `size`
    /// into `self` at `dst_start`. Channel counts must agree.
    pub fn paste(
        &mut self,
        dst_start: [usize; 3],
        src: &Tensor4<T>,
        src_start: [usize; 3],
        size: Dims,
    ) {
        assert_eq!(self.shape.channels, src.shape.channels);
        let dst_dims = self.shape.spatial;
        let src_dims = src.shape.spatial;
        let dn = dst_dims.len();
        for c in 0..self.shape.channels {
            let s = src.channel(c);
            let d = &mut self.data[c * dn..(c + 1) * dn];
            for z in 0..size.depth {
                for y in 0..size.height {
                    let so = src_dims.index(src_start[0] + z, src_start[1] + y, src_start[2]);
                    let dof = dst_dims.index(dst_start[0] + z, dst_start[1] + y, dst_start[2]);
                    d[dof..dof + size.width].copy_from_slice(&s[so..so + size.width]);
                }
            }
        }
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}
