//! Dense row-major `f64` matrices.
//!
//! Everything in the crate (labels, network outputs, confusion matrices,
//! generator matrices, layer weights) is carried by [`Matrix`]. Operations
//! never alias their inputs with their output: each returns a fresh value.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows.
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
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

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    ///
    /// Accumulates in the same order as `self.transpose().matmul(rhs)`, so
    /// both routes give bitwise-identical results.
    pub fn transpose_left_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::Shape {
                op: "transpose_left_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let b_row = rhs.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_transpose_right(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "matmul_transpose_right",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// Column index of the largest entry in every row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Empty { op: "argmax_rows" });
        }
        Ok(self.iter_rows().map(argmax).collect())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r.iter().sum()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        Ok(self
            .zip_with(rhs, "max_abs_diff", |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }

    /// One row per line, comma separated, no header. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.iter_rows() {
            for (j, v) in r.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("csv line {}: {e}", line + 1)))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("csv line {}: {f:?}: {e}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Matrix> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Matrix::from_csv(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let b = m(&[&[2.0, 3.0], &[4.0, 5.0]]);
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);

        let sel = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let rhs = m(&[&[7.0, 8.0], &[9.0, 10.0]]);
        assert_eq!(sel.matmul(&rhs).unwrap(), m(&[&[7.0, 8.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_hand_expansion() {
        // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3)
            .matmul(&Matrix::zeros(2, 3))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transpose_left_examples() {
        let b = m(&[&[0.7, 0.3], &[0.2, 0.8]]);
        assert_eq!(Matrix::identity(2).transpose_left_matmul(&b).unwrap(), b);

        let ones = m(&[&[1.0], &[1.0]]);
        let b = m(&[&[0.6, 0.4], &[0.8, 0.2]]);
        let got = ones.transpose_left_matmul(&b).unwrap();
        assert!(got.max_abs_diff(&m(&[&[1.4, 0.6]])).unwrap() < 1e-15);

        assert!(Matrix::zeros(3, 2)
            .transpose_left_matmul(&Matrix::zeros(2, 2))
            .is_err());
    }

    #[test]
    fn argmax_ties_and_empty() {
        assert_eq!(m(&[&[0.1, 0.9]]).argmax_rows().unwrap(), vec![1]);
        assert_eq!(m(&[&[0.5, 0.5]]).argmax_rows().unwrap(), vec![0]);
        assert!(Matrix::zeros(0, 3).argmax_rows().is_err());
        assert!(Matrix::zeros(2, 0).argmax_rows().is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let a = m(&[&[0.1, -2.5e-17, 3.0], &[1.0 / 3.0, 0.0, -7.25]]);
        assert_eq!(Matrix::from_csv(&a.to_csv()).unwrap(), a);
        assert!(Matrix::from_csv("1,2\n3\n").is_err());
    }

    fn arb_matrix(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_is_neutral(a in arb_matrix(8)) {
            let left = Matrix::identity(a.rows()).matmul(&a).unwrap();
            let right = a.matmul(&Matrix::identity(a.cols())).unwrap();
            prop_assert!(left.max_abs_diff(&a).unwrap() <= 1e-15);
            prop_assert!(right.max_abs_diff(&a).unwrap() <= 1e-15);
        }

        #[test]
        fn transpose_left_matches_explicit_transpose(
            (a, b) in (1usize..=64, 1usize..=64, 1usize..=64).prop_flat_map(|(r, ca, cb)| (
                proptest::collection::vec(-1.0f64..1.0, r * ca)
                    .prop_map(move |d| Matrix::from_vec(r, ca, d).unwrap()),
                proptest::collection::vec(-1.0f64..1.0, r * cb)
                    .prop_map(move |d| Matrix::from_vec(r, cb, d).unwrap()),
            ))
        ) {
            let fast = a.transpose_left_matmul(&b).unwrap();
            let slow = a.transpose().matmul(&b).unwrap();
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()));
            }
        }

        #[test]
        fn argmax_matches_linear_scan(a in arb_matrix(12)) {
            let got = a.argmax_rows().unwrap();
            for (r, &g) in got.iter().enumerate() {
                let row = a.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let first = row.iter().position(|&v| v == max).unwrap();
                prop_assert_eq!(g, first);
            }
        }

        #[test]
        fn transpose_right_matches_explicit(a in arb_matrix(10), seed in 0u64..1000) {
            let b = Matrix::from_vec(
                (seed % 7 + 1) as usize,
                a.cols(),
                (0..((seed % 7 + 1) as usize * a.cols())).map(|i| (i as f64 * 0.37).sin()).collect(),
            ).unwrap();
            let fast = a.matmul_transpose_right(&b).unwrap();
            let slow = a.matmul(&b.transpose()).unwrap();
            prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
    }
}
