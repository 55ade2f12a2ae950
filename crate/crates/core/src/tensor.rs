//! Dense row-major tensors and the handful of kernels the layers need.
//!
//! Storage is always contiguous and row-major. There are no views or
//! stride tricks: a reshape moves the buffer, a transpose copies it.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{dim_err, FbError, Result};

/// Floating-point element types a [`Tensor`] can hold.
pub trait Element: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Element width in bytes; doubles as the on-disk width code.
    const WIDTH: u8;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const WIDTH: u8 = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

impl Element for f32 {
    const WIDTH: u8 = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, rounding to the element width.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Returns `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Slice of the `i`-th sub-tensor along the leading axis.
    pub fn outer(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0].max(1);
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(self, other)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In place: `self += alpha * other`.
    pub fn axpy_inplace(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    /// In place: sets every element to zero.
    pub fn fill_zero_inplace(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += alpha * x` over slices.
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.dims2()?;
    let (p2, q) = b.dims2()?;
    if p != p2 {
        return Err(dim_err(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * q];
    gemm_nn(m, p, q, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, q], out)
}

/// `c += a · b` with `a: m×p`, `b: p×q`, `c: m×q`, all row-major.
pub fn gemm_nn<T: Element>(m: usize, p: usize, q: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * q..(i + 1) * q];
        for l in 0..p {
            let a_il = a[i * p + l];
            if a_il == T::zero() {
                continue;
            }
            axpy(a_il, &b[l * q..(l + 1) * q], c_row);
        }
    }
}

/// `c += a · bᵀ` with `a: m×p`, `b: q×p`, `c: m×q`.
pub fn gemm_nt<T: Element>(m: usize, p: usize, q: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..q {
            c[i * q + j] = c[i * q + j] + dot(a_row, &b[j * p..(j + 1) * p]);
        }
    }
}

/// `c += aᵀ · b` with `a: p×m`, `b: p×q`, `c: m×q`.
pub fn gemm_tn<T: Element>(m: usize, p: usize, q: usize, a: &[T], b: &[T], c: &mut [T]) {
    for l in 0..p {
        let b_row = &b[l * q..(l + 1) * q];
        for i in 0..m {
            let a_li = a[l * m + i];
            if a_li == T::zero() {
                continue;
            }
            axpy(a_li, b_row, &mut c[i * q..(i + 1) * q]);
        }
    }
}

/// Shape of a 2-D convolution. Channel counts describe the layer, the
/// kernel/stride/pad fields describe patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }

    /// Length of one flattened receptive field, `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(dim_err(format!("channel counts must be positive: {self:?}")));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(dim_err(format!("kernel and stride must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial extent for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |extent: usize, k: usize| -> Result<usize> {
            let padded = extent + 2 * self.pad;
            if padded < k {
                return Err(dim_err(format!(
                    "kernel {k} does not fit input extent {extent} with pad {}",
                    self.pad
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((axis(h, self.kernel_h)?, axis(w, self.kernel_w)?))
    }
}

/// Writes the patch matrix of one `C×H×W` image into `out`, which must hold
/// `patch_len × (Ho·Wo)` elements.
///
/// Row order is channel-major, then kernel row, then kernel column; column
/// `i` is output location `i` in row-major order. Padding reads as zero.
pub fn im2col_into<T: Element>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    let cols = out_h * out_w;
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        dst[oy * out_w + ox] = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            T::zero()
                        } else {
                            plane[iy as usize * w + ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: accumulates patch columns back into `out`
/// (`C×H×W`), summing overlapping contributions. `out` is not cleared.
pub fn col2im_accumulate<T: Element>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    let ncols = out_h * out_w;
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w + ix as usize];
                        *dst = *dst + src[oy * out_w + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Patch matrix of a `C×H×W` tensor; see [`im2col_into`] for the ordering.
pub fn im2col<T: Element>(x: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = match x.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(dim_err(format!("im2col expects C×H×W, got {:?}", x.shape()))),
    };
    if c != g.in_channels {
        return Err(dim_err(format!(
            "im2col: input has {c} channels, geometry expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let mut out = vec![T::zero(); g.patch_len() * oh * ow];
    im2col_into(x.data(), c, h, w, g, oh, ow, &mut out);
    Tensor::new(vec![g.patch_len(), oh * ow], out)
}

pub fn col2im<T: Element>(cols: &Tensor<T>, g: &ConvGeometry, h: usize, w: usize) -> Result<Tensor<T>> {
    let (oh, ow) = g.output_hw(h, w)?;
    if cols.shape() != [g.patch_len(), oh * ow] {
        return Err(dim_err(format!(
            "col2im: columns have shape {:?}, geometry needs {:?}",
            cols.shape(),
            [g.patch_len(), oh * ow]
        )));
    }
    let mut out = vec![T::zero(); g.in_channels * h * w];
    col2im_accumulate(cols.data(), g.in_channels, h, w, g, oh, ow, &mut out);
    Tensor::new(vec![g.in_channels, h, w], out)
}

pub const MAGIC: &[u8; 4] = b"FBKT";

impl<T: Element> Tensor<T> {
    /// Serializes as `FBKT`, width byte, rank byte, little-endian `u64`
    /// extents, then the little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.rank() + self.len() * T::WIDTH as usize);
        out.extend_from_slice(MAGIC);
        out.push(T::WIDTH);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    /// Reads one tensor record. The stored width must match `T`.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| FbError::Format(m.to_string());
        let mut head = [0u8; 6];
        r.read_exact(&mut head).map_err(|_| fmt("truncated tensor header"))?;
        if &head[..4] != MAGIC {
            return Err(fmt("bad magic, expected FBKT"));
        }
        if head[4] != T::WIDTH {
            return Err(FbError::Format(format!(
                "element width {} bytes on disk, {} requested",
                head[4],
                T::WIDTH
            )));
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| fmt("truncated tensor extents"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let width = T::WIDTH as usize;
        let mut payload = vec![0u8; len * width];
        r.read_exact(&mut payload)
            .map_err(|_| fmt("truncated tensor payload"))?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}
