//! Dense row-major fp32 tensors and the handful of kernels a Llama forward
//! pass needs.
//!
//! Every reduction runs in a fixed order (inner index ascending) so results
//! are bit-reproducible across calls and across processes. Kernels check
//! their outputs and report non-finite values instead of propagating them.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("rope: head dimension {0} is odd")]
    OddDim(usize),
    #[error("{op}: index {index} out of range {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
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

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(&mut f).collect();
        Self { shape, data }
    }

    /// A 2-D tensor from row slices of equal length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
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

    pub fn byte_len(&self) -> usize {
        self.data.len() * 4
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        Self::new(vec![rows, width], data)
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start > end || end > rows {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: end,
                bound: rows,
            });
        }
        Self::new(
            vec![end - start, cols],
            self.data[start * cols..end * cols].to_vec(),
        )
    }

    /// Concatenates rank-2 tensors along columns, in order.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Self, TensorError> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(vec![0, 0]));
        };
        let (rows, _) = first.dims2("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self::new(vec![rows, total], data)
    }

    /// Appends the rows of `other` below `self` (rank-2, equal column count).
    pub fn append_rows(&mut self, other: &Tensor) -> Result<(), TensorError> {
        let (rows, cols) = self.dims2("append_rows")?;
        let (orows, ocols) = other.dims2("append_rows")?;
        if cols != ocols {
            return Err(TensorError::ShapeMismatch {
                op: "append_rows",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.shape = vec![rows + orows, cols];
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite(op)?;
        Ok(out)
    }
}

/// Row-major product `a[m×k] · b[k×n]`.
///
/// Each output element accumulates from `0.0` over `k` ascending, which is
/// the same operation sequence as a textbook triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = Tensor::new(vec![m, n], out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Softmax of one row in place, with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = a.dims2("softmax_rows")?;
    a.ensure_finite("softmax_rows")?;
    let mut out = a.clone();
    for i in 0..m {
        softmax_in_place(&mut out.data[i * n..(i + 1) * n]);
    }
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// Per-row `x / sqrt(mean(x²) + eps) · gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
    let (m, h) = x.dims2("rms_norm")?;
    if gain.len() != h {
        return Err(TensorError::ShapeMismatch {
            op: "rms_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(m * h);
    for i in 0..m {
        let row = x.row(i);
        let mut ss = 0.0f32;
        for &v in row {
            ss += v * v;
        }
        let denom = libm::sqrtf(ss / h as f32 + eps);
        for (&v, &g) in row.iter().zip(&gain.data) {
            // 0/0 for an all-zero row with eps = 0 is defined as zero.
            let n = if denom == 0.0 { 0.0 } else { v / denom };
            out.push(n * g);
        }
    }
    let out = Tensor::new(vec![m, h], out)?;
    out.ensure_finite("rms_norm")?;
    Ok(out)
}

pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

pub fn silu(x: &Tensor) -> Result<Tensor, TensorError> {
    let out = Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| silu_scalar(v)).collect(),
    };
    out.ensure_finite("silu")?;
    Ok(out)
}

/// Rotary position embedding on a `[seq × d]` tensor, rotating the
/// interleaved pairs `(2i, 2i+1)` by `pos · theta_base^(-2i/d)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], theta_base: f32) -> Result<Tensor, TensorError> {
    let (_, d) = x.dims2("rope")?;
    rope_apply_heads(x, d, positions, theta_base)
}

/// Like [`rope_apply`], on a `[seq × heads·head_dim]` tensor, head by head.
pub fn rope_apply_heads(
    x: &Tensor,
    head_dim: usize,
    positions: &[usize],
    theta_base: f32,
) -> Result<Tensor, TensorError> {
    let (seq, width) = x.dims2("rope")?;
    if !head_dim.is_multiple_of(2) {
        return Err(TensorError::OddDim(head_dim));
    }
    if head_dim == 0 || width % head_dim != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "rope",
            left: x.shape.clone(),
            right: vec![head_dim],
        });
    }
    if positions.len() != seq {
        return Err(TensorError::ShapeMismatch {
            op: "rope",
            left: x.shape.clone(),
            right: vec![positions.len()],
        });
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut out.data[r * width..(r + 1) * width];
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..head_dim / 2 {
                let freq = libm::powf(theta_base, -((2 * i) as f32) / head_dim as f32);
                let angle = pos as f32 * freq;
                let (sin, cos) = (libm::sinf(angle), libm::cosf(angle));
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    out.ensure_finite("rope")?;
    Ok(out)
}

/// Sums tensors elementwise in slice order.
pub fn sum_in_order(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    let Some((first, rest)) = parts.split_first() else {
        return Err(TensorError::Rank {
            op: "sum_in_order",
            expected: 1,
            shape: Vec::new(),
        });
    };
    let mut acc = first.clone();
    for p in rest {
        acc = acc.add(p)?;
    }
    Ok(acc)
}
