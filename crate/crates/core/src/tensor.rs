//! Dense row-major storage and the two matrix-product kernels.
//!
//! Both kernels accumulate every output entry over the inner index in
//! ascending order, starting from `+0.0`. With that order fixed, the
//! sign-accumulation kernel is bit-identical to the multiply kernel on
//! ternary operands, since each partial product `±x` or `0·x` is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds a column vector (rows × 1) to every column.
    pub fn add_column(&mut self, column: &Matrix) -> Result<()> {
        if column.cols != 1 || column.rows != self.rows {
            return Err(Error::Shape {
                op: "add_column",
                left: self.shape(),
                right: column.shape(),
            });
        }
        for r in 0..self.rows {
            let b = column.data[r];
            for v in self.row_mut(r) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Elementwise product; one multiplication per entry.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "hadamard",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    /// Row sums accumulated in ascending column order, as a rows × 1 matrix.
    pub fn row_sums(&self) -> Matrix {
        let data = (0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0f32, |acc, &v| acc + v))
            .collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Gathers columns `indices` into a new matrix.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (dst, &c) in out.row_mut(r).iter_mut().zip(indices) {
                *dst = src[c];
            }
        }
        out
    }
}

/// Sampled weights, every entry exactly -1, 0 or +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl TernaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "ternary from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        assert!(
            data.iter().all(|v| (-1..=1).contains(v)),
            "ternary entries must be -1, 0 or +1"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn check_inner(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left.1 != right.0 {
        return Err(Error::Shape { op, left, right });
    }
    Ok(())
}

fn check_rows(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left.0 != right.0 {
        return Err(Error::Shape { op, left, right });
    }
    Ok(())
}

/// Output columns handled per pass, sized so a block of output rows stays
/// in L1.
const COLUMN_TILE: usize = 256;

fn split4(rows: &mut [f32], width: usize) -> [&mut [f32]; 4] {
    let (r0, rest) = rows.split_at_mut(width);
    let (r1, rest) = rest.split_at_mut(width);
    let (r2, r3) = rest.split_at_mut(width);
    [r0, r1, r2, r3]
}

avx2_dispatch! {
    /// `a · b` with generic multiplies. Performs `a.rows · a.cols · b.cols` of them.
    ///
    /// Every output accumulates its products in ascending inner index from
    /// `+0.0`; blocking only changes which outputs are in flight together.
    pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        check_inner("matmul", a.shape(), b.shape())?;
        let (n, p) = (a.cols, b.cols);
        let mut out = Matrix::zeros(a.rows, p);
        let full = a.rows / 4 * 4;
        for j0 in (0..p).step_by(COLUMN_TILE) {
            let j1 = (j0 + COLUMN_TILE).min(p);
            for (blk, rows) in out.data[..full * p].chunks_mut(4 * p).enumerate() {
                let i = blk * 4;
                let [o0, o1, o2, o3] = split4(rows, p);
                let (o0, o1) = (&mut o0[j0..j1], &mut o1[j0..j1]);
                let (o2, o3) = (&mut o2[j0..j1], &mut o3[j0..j1]);
                for k in 0..n {
                    let a0 = a.data[i * n + k];
                    let a1 = a.data[(i + 1) * n + k];
                    let a2 = a.data[(i + 2) * n + k];
                    let a3 = a.data[(i + 3) * n + k];
                    let bk = &b.data[k * p + j0..k * p + j1];
                    let outs = o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut());
                    for ((((x0, x1), x2), x3), &bv) in outs.zip(bk) {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
            }
            for i in full..a.rows {
                let o = &mut out.data[i * p + j0..i * p + j1];
                for (k, &aik) in a.row(i).iter().enumerate() {
                    let bk = &b.data[k * p + j0..k * p + j1];
                    for (x, &bv) in o.iter_mut().zip(bk) {
                        *x += aik * bv;
                    }
                }
            }
        }
        Ok(out)
}
}

avx2_dispatch! {
    /// `aᵀ · b` with generic multiplies, accumulated over the rows of `a` in
    /// ascending order.
    pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        check_rows("matmul_transposed", a.shape(), b.shape())?;
        let p = b.cols;
        let mut out = Matrix::zeros(a.cols, p);
        let full = a.rows / 4 * 4;
        for i in (0..full).step_by(4) {
            let (b0, b1, b2, b3) = (b.row(i), b.row(i + 1), b.row(i + 2), b.row(i + 3));
            for k in 0..a.cols {
                let (a0, a1, a2, a3) = (a.get(i, k), a.get(i + 1, k), a.get(i + 2, k), a.get(i + 3, k));
                let o = &mut out.data[k * p..(k + 1) * p];
                for ((((x, &v0), &v1), &v2), &v3) in o.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                    let mut acc = *x;
                    acc += a0 * v0;
                    acc += a1 * v1;
                    acc += a2 * v2;
                    acc += a3 * v3;
                    *x = acc;
                }
            }
        }
        for i in full..a.rows {
            let b_row = b.row(i);
            for (k, &aik) in a.row(i).iter().enumerate() {
                let out_row = &mut out.data[k * p..(k + 1) * p];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
        Ok(out)
}
}

avx2_dispatch! {
    /// `w · x` for ternary `w`: each weight adds, subtracts or skips a row of `x`.
    pub fn sign_accumulate_matmul(w: &TernaryMatrix, x: &Matrix) -> Result<Matrix> {
        check_inner("sign_accumulate_matmul", w.shape(), x.shape())?;
        let mut out = Matrix::zeros(w.rows, x.cols);
        for i in 0..w.rows {
            let out_row = &mut out.data[i * x.cols..(i + 1) * x.cols];
            for (k, &s) in w.row(i).iter().enumerate() {
                let x_row = &x.data[k * x.cols..(k + 1) * x.cols];
                match s {
                    1 => out_row.iter_mut().zip(x_row).for_each(|(o, &v)| *o += v),
                    -1 => out_row.iter_mut().zip(x_row).for_each(|(o, &v)| *o -= v),
                    _ => {}
                }
            }
        }
        Ok(out)
}
}

avx2_dispatch! {
    /// `wᵀ · d` for ternary `w`, accumulated over the rows of `w` in ascending order.
    pub fn sign_accumulate_transposed(w: &TernaryMatrix, d: &Matrix) -> Result<Matrix> {
        check_rows("sign_accumulate_transposed", w.shape(), d.shape())?;
        let mut out = Matrix::zeros(w.cols, d.cols);
        for i in 0..w.rows {
            let d_row = d.row(i);
            for (k, &s) in w.row(i).iter().enumerate() {
                let out_row = &mut out.data[k * d.cols..(k + 1) * d.cols];
                match s {
                    1 => out_row.iter_mut().zip(d_row).for_each(|(o, &v)| *o += v),
                    -1 => out_row.iter_mut().zip(d_row).for_each(|(o, &v)| *o -= v),
                    _ => {}
                }
            }
        }
        Ok(out)
}
}
