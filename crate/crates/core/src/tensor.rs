//! Dense row-major tensors and the small set of matrix kernels the
//! reference math needs.
//!
//! Everything is 64-bit; the simulator's BF16/FP32 split is a bandwidth
//! concern handled elsewhere and is never reproduced numerically here.

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` carrying its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and that
    /// every extent is at least 1.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-rank-2 tensor");
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-rank-2 tensor");
        self.shape[1]
    }

    /// One row of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scales every element in place.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Adds `other` elementwise; shapes must match.
    pub fn add_assign(&mut self, other: &DenseTensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// `a (m x k) * b (k x n) -> (m x n)`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    let mut out = DenseTensor::zeros(vec![m, n]);
    for i in 0..m {
        let ra = a.row(i);
        let ro = out.row_mut(i);
        for (p, &av) in ra.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let rb = b.row(p);
            for j in 0..n {
                ro[j] += av * rb[j];
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `(n x k)` -> `(m x n)`.
pub fn matmul_nt(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_nt inner dimension mismatch");
    let mut out = DenseTensor::zeros(vec![m, n]);
    for i in 0..m {
        let ra = a.row(i);
        let ro = out.row_mut(i);
        for (j, item) in ro.iter_mut().enumerate().take(n) {
            let rb = b.row(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += ra[p] * rb[p];
            }
            *item = acc;
        }
    }
    out
}

/// `a^T * b` where `a` is `(k x m)` and `b` is `(k x n)` -> `(m x n)`.
pub fn matmul_tn(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_tn inner dimension mismatch");
    let mut out = DenseTensor::zeros(vec![m, n]);
    for p in 0..k {
        let ra = a.row(p);
        let rb = b.row(p);
        for (i, &av) in ra.iter().enumerate().take(m) {
            if av == 0.0 {
                continue;
            }
            let ro = out.row_mut(i);
            for j in 0..n {
                ro[j] += av * rb[j];
            }
        }
    }
    out
}

/// Lowers one example's `(c_in, h, w)` input into the im2col operand matrix
/// of shape `(out_h*out_w, c_in*k_h*k_w)`, so a convolution becomes a plain
/// matrix multiply against the `(c_in*k_h*k_w, c_out)` weight matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &DenseTensor,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    if input.len() != c_in * in_h * in_w {
        return Err(Error::Config(format!(
            "im2col input has {} elements, expected {}",
            input.len(),
            c_in * in_h * in_w
        )));
    }
    let out_h = conv_out_extent(in_h, kernel, stride, padding)?;
    let out_w = conv_out_extent(in_w, kernel, stride, padding)?;
    let cols = c_in * kernel * kernel;
    let mut out = DenseTensor::zeros(vec![out_h * out_w, cols]);
    for oh in 0..out_h {
        for ow in 0..out_w {
            let row = oh * out_w + ow;
            for c in 0..c_in {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let ih = oh * stride + ky;
                        let iw = ow * stride + kx;
                        // Positions inside the zero padding contribute 0.
                        let v = if ih >= padding
                            && ih < in_h + padding
                            && iw >= padding
                            && iw < in_w + padding
                        {
                            input.data()[c * in_h * in_w + (ih - padding) * in_w + (iw - padding)]
                        } else {
                            0.0
                        };
                        out.data_mut()[row * cols + c * kernel * kernel + ky * kernel + kx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output spatial extent of a convolution; errors if it collapses below 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("conv kernel/stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "conv output extent < 1 (input {input}, kernel {kernel}, padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}
