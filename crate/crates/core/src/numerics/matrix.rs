use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of independent partial sums carried by [`dot`].
const LANES: usize = 8;

/// Rows handed to one rayon task. Fixed so work splitting never depends on
/// the size of the thread pool.
pub(crate) const ROW_CHUNK: usize = 32;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so degenerate widths go through a range.
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols.max(1), p % self.cols.max(1)))
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Frobenius norm with fixed-order accumulation.
    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dot product with a fixed accumulation order.
///
/// Entry `i` is added to partial sum `i % 8` (in increasing `i`), the eight
/// partials are combined pairwise, and the tail beyond the last full block of
/// eight is added last, left to right.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; LANES];
    let ac = a.chunks_exact(LANES);
    let bc = b.chunks_exact(LANES);
    let (at, bt) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = reduce_lanes(&acc);
    for (x, y) in at.iter().zip(bt) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn reduce_lanes(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// `y += alpha * x`, elementwise.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(matmul_nt(a, &b.transpose()))
}

/// `a · bᵀ` where both operands are stored row-major with the same width.
///
/// Every entry is accumulated as `((a₀b₀ + a₁b₁) + a₂b₂) + …`, strictly in
/// order of the shared index. Output rows are computed in fixed chunks on the
/// rayon pool, so the result does not depend on the number of threads.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_nt: inner dimensions differ");
    let mut out = Matrix::zeros(a.rows, b.rows);
    if a.rows == 0 || b.rows == 0 {
        return out;
    }
    let n = b.rows;
    let packed = pack_panels(b);
    out.data
        .par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(c, block)| {
            let r0 = c * ROW_CHUNK;
            let nrows = block.len() / n;
            let mut i = 0;
            while i + MR <= nrows {
                row_block::<MR>(a, &packed, n, r0 + i, &mut block[i * n..(i + MR) * n]);
                i += MR;
            }
            for ii in i..nrows {
                row_block::<1>(a, &packed, n, r0 + ii, &mut block[ii * n..(ii + 1) * n]);
            }
        });
    out
}

/// Rows of the register tile.
const MR: usize = 4;
/// Columns of the register tile.
const NR: usize = 8;

/// `b` regrouped into panels of `NR` rows, each stored column by column so
/// the kernel reads it contiguously. The last panel is zero-padded.
fn pack_panels(b: &Matrix) -> Vec<f64> {
    let d = b.cols;
    let panels = b.rows.div_ceil(NR);
    let mut packed = vec![0.0; panels * d * NR];
    for (j, row) in b.row_iter().enumerate() {
        let (t, l) = (j / NR, j % NR);
        let panel = &mut packed[t * d * NR..(t + 1) * d * NR];
        for (p, &v) in row.iter().enumerate() {
            panel[p * NR + l] = v;
        }
    }
    packed
}

/// Rows `i0..i0+R` of `a · bᵀ` into `out` (`R` rows of width `n`).
#[inline(always)]
fn row_block<const R: usize>(a: &Matrix, packed: &[f64], n: usize, i0: usize, out: &mut [f64]) {
    let d = a.cols;
    let arows: [&[f64]; R] = std::array::from_fn(|r| &a.row(i0 + r)[..d]);
    for (t, panel) in packed.chunks_exact(d * NR).enumerate() {
        let panel = &panel[..d * NR];
        let mut acc = [[0.0f64; NR]; R];
        for p in 0..d {
            let bv: &[f64; NR] = panel[p * NR..p * NR + NR].try_into().expect("panel column");
            for r in 0..R {
                let av = arows[r][p];
                for l in 0..NR {
                    acc[r][l] += av * bv[l];
                }
            }
        }
        let j0 = t * NR;
        let width = NR.min(n - j0);
        for (r, acc_r) in acc.iter().enumerate() {
            out[r * n + j0..r * n + j0 + width].copy_from_slice(&acc_r[..width]);
        }
    }
}
