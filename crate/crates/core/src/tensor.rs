//! Dense matrices and tensors.
//!
//! Tensors are stored in the canonical linearization where the LAST mode
//! index varies fastest. Under this convention
//!
//! ```text
//! vec(S ×_1 A_1 ×_2 A_2 … ×_T A_T) = (A_1 ⊗ A_2 ⊗ … ⊗ A_T) · vec(S)
//! ```
//!
//! holds with the Kronecker factors in natural order. Mode indices in this
//! module are zero-based.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("{} rows on the right", self.cols),
                other.rows,
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dims("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &DenseMatrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &DenseMatrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense tensor with last-mode-fastest storage.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "tensor shape must be nonempty with positive modes, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: data.len(),
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

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Canonical linearization of a tensor.
pub fn vec(t: &DenseTensor) -> Vec<f64> {
    t.data.clone()
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], shape: &[usize]) -> Result<DenseTensor> {
    DenseTensor::new(shape.to_vec(), v.to_vec())
}

/// Splits `shape` around `mode` into (product before, size, product after).
#[inline]
fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer = shape[..mode].iter().product();
    let inner = shape[mode + 1..].iter().product();
    (outer, shape[mode], inner)
}

/// Raw k-mode product on flat buffers. `out` must hold
/// `outer * m.rows() * inner` values and is overwritten.
pub(crate) fn mode_product_raw(
    src: &[f64],
    shape: &[usize],
    m: &DenseMatrix,
    mode: usize,
    out: &mut [f64],
) {
    let (outer, n, inner) = split_at_mode(shape, mode);
    let r = m.rows();
    debug_assert_eq!(m.cols(), n);
    debug_assert_eq!(out.len(), outer * r * inner);
    out.iter_mut().for_each(|x| *x = 0.0);
    for o in 0..outer {
        let src_block = &src[o * n * inner..(o + 1) * n * inner];
        let dst_block = &mut out[o * r * inner..(o + 1) * r * inner];
        for row in 0..r {
            let dst = &mut dst_block[row * inner..(row + 1) * inner];
            for (c, &w) in m.row(row).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let s = &src_block[c * inner..(c + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(s) {
                    *d += w * x;
                }
            }
        }
    }
}

fn check_mode(t: &DenseTensor, mode: usize) -> Result<()> {
    if mode >= t.order() {
        return Err(Error::ModeOutOfRange {
            mode,
            order: t.order(),
        });
    }
    Ok(())
}

/// k-mode product `t ×_k m` (zero-based `mode`).
pub fn mode_product(t: &DenseTensor, m: &DenseMatrix, mode: usize) -> Result<DenseTensor> {
    check_mode(t, mode)?;
    if m.cols() != t.shape[mode] {
        return Err(Error::dims("mode_product", t.shape[mode], m.cols()));
    }
    let mut shape = t.shape.clone();
    shape[mode] = m.rows();
    let mut out = DenseTensor::zeros(shape);
    mode_product_raw(&t.data, &t.shape, m, mode, &mut out.data);
    Ok(out)
}

/// Kronecker product of all factors, in order.
pub fn kron_compose(factors: &[DenseMatrix]) -> Result<DenseMatrix> {
    let (first, rest) = factors.split_first().ok_or(Error::EmptyFactorList)?;
    let mut acc = first.clone();
    for b in rest {
        acc = kron2(&acc, b);
    }
    Ok(acc)
}

fn kron2(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (br, bc) = (b.rows(), b.cols());
    let mut out = DenseMatrix::zeros(a.rows() * br, a.cols() * bc);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a[(i, j)];
            for r in 0..br {
                for c in 0..bc {
                    out[(i * br + r, j * bc + c)] = aij * b[(r, c)];
                }
            }
        }
    }
    out
}

/// Mode-k unfolding: `shape[k]` rows; columns run over the remaining modes,
/// last mode fastest.
pub fn mode_unfold(t: &DenseTensor, mode: usize) -> Result<DenseMatrix> {
    check_mode(t, mode)?;
    let (outer, n, inner) = split_at_mode(&t.shape, mode);
    let mut m = DenseMatrix::zeros(n, outer * inner);
    for o in 0..outer {
        for k in 0..n {
            let src = &t.data[(o * n + k) * inner..(o * n + k + 1) * inner];
            m.row_mut(k)[o * inner..(o + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(m)
}

/// Inverse of [`mode_unfold`].
pub fn mode_fold(m: &DenseMatrix, shape: &[usize], mode: usize) -> Result<DenseTensor> {
    if mode >= shape.len() {
        return Err(Error::ModeOutOfRange {
            mode,
            order: shape.len(),
        });
    }
    let (outer, n, inner) = split_at_mode(shape, mode);
    if m.rows() != n || m.cols() != outer * inner {
        return Err(Error::dims(
            "mode_fold",
            format!("{}x{}", n, outer * inner),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    let mut t = DenseTensor::zeros(shape.to_vec());
    for o in 0..outer {
        for k in 0..n {
            t.data[(o * n + k) * inner..(o * n + k + 1) * inner]
                .copy_from_slice(&m.row(k)[o * inner..(o + 1) * inner]);
        }
    }
    Ok(t)
}
