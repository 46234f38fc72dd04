//! Small dense linear algebra over `f64`.
//!
//! Matrices are stored column-major, so [`Matrix::vectorize`] is the
//! conventional column-stacking `vec` operator and is a plain copy of the
//! backing storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic inputs are clamped to this magnitude before exponentiation.
const SIGMOID_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("vector must have positive length".into()));
        }
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("vector entry {i} is not finite")));
        }
        Ok(Self(entries))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * c).collect())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dense matrix in column-major order: entry `(i, j)` lives at `i + rows * j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row slices. All rows must share one positive length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 {
            return Err(Error::Config("matrix must have positive dimensions".into()));
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("ragged rows".into()));
        }
        let mut out = Self::zeros(m, n);
        for (i, row) in rows.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                out.set(i, j, x);
            }
        }
        out.check_finite()?;
        Ok(out)
    }

    /// Wraps column-major data.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("matrix must have positive dimensions".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Inverse of [`Matrix::vectorize`].
    pub fn reshape(v: &Vector, rows: usize, cols: usize) -> Result<Self> {
        Self::from_col_major(rows, cols, v.as_slice().to_vec())
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(k) => Err(Error::Numerical(format!(
                "matrix entry ({}, {}) is not finite",
                k % self.rows,
                k / self.rows
            ))),
            None => Ok(()),
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.rows * j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i + self.rows * j] = x;
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column-stacking `vec` operator.
    pub fn vectorize(&self) -> Vector {
        Vector(self.data.clone())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(dim_mismatch("matvec", self.shape(), x.len()));
        }
        let mut out = vec![0.0; self.rows];
        gemv(self, x.as_slice(), &mut out);
        Ok(Vector(out))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Config(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
            gemv(self, other.column(j), dst);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn dim_mismatch(op: &str, shape: (usize, usize), len: usize) -> Error {
    Error::Config(format!("{op}: {}x{} matrix against vector of length {len}", shape.0, shape.1))
}

/// `u vᵀ`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (j, &vj) in v.0.iter().enumerate() {
        for (i, &ui) in u.0.iter().enumerate() {
            m.data[i + u.len() * j] = ui * vj;
        }
    }
    m
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic sigmoid.
pub fn sigmoid(x: &Vector) -> Vector {
    Vector(x.0.iter().map(|&v| logistic(v)).collect())
}

pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Config(format!("cosine: lengths {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.scale(1.0 / n))
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    if b.len() != w.rows() {
        return Err(Error::Config(format!(
            "affine: bias of length {} for {} output rows",
            b.len(),
            w.rows()
        )));
    }
    let mut y = w.matvec(x)?;
    for (yi, bi) in y.0.iter_mut().zip(&b.0) {
        *yi += bi;
    }
    Ok(y)
}

// Slice kernels used on the hot training path. Callers guarantee shapes.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += W x`.
#[inline]
pub(crate) fn gemv_acc(w: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &w.data[j * w.rows..(j + 1) * w.rows];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

/// `out = W x`.
#[inline]
pub(crate) fn gemv(w: &Matrix, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    gemv_acc(w, x, out);
}

/// `out += Wᵀ y`.
#[inline]
pub(crate) fn gemv_t_acc(w: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (j, o) in out.iter_mut().enumerate() {
        *o += dot(&w.data[j * w.rows..(j + 1) * w.rows], y);
    }
}

/// `W += x yᵀ`.
#[inline]
pub(crate) fn ger(w: &mut Matrix, x: &[f64], y: &[f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(y.len(), w.cols);
    let rows = w.rows;
    for (j, &yj) in y.iter().enumerate() {
        if yj == 0.0 {
            continue;
        }
        let col = &mut w.data[j * rows..(j + 1) * rows];
        for (c, &xi) in col.iter_mut().zip(x) {
            *c += xi * yj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn outer_cases() {
        let m = outer(&Vector::basis(2, 0), &Vector::basis(3, 1));
        for i in 0..2 {
            for j in 0..3 {
                let want = if (i, j) == (0, 1) { 1.0 } else { 0.0 };
                assert_eq!(m.get(i, j), want);
            }
        }
        let z = outer(&Vector::zeros(2), &v(&[1.0, 2.0, 3.0]));
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        let m = outer(&v(&[1.0, 2.0]), &v(&[3.0, 4.0]));
        assert_eq!(m, Matrix::from_rows(&[vec![3.0, 4.0], vec![6.0, 8.0]]).unwrap());
    }

    #[test]
    fn vectorize_is_column_major() {
        assert_eq!(Matrix::identity(2).vectorize().as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(Matrix::zeros(3, 2).vectorize().as_slice(), &[0.0; 6]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.vectorize().as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(&v(&[0.0, 0.0])).as_slice(), &[0.5, 0.5]);
        // 1 / (1 + e^-2)
        assert!((sigmoid(&v(&[2.0]))[0] - 0.880_797_077_977_882_3).abs() < 1e-15);
        let x = v(&[-3.0, -0.1, 0.7, 12.0]);
        let s = sigmoid(&x);
        let t = sigmoid(&x.scale(-1.0));
        for i in 0..x.len() {
            assert!((s[i] + t[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_does_not_overflow() {
        let s = sigmoid(&v(&[-1e3, 1e3, -750.0, 750.0]));
        for (i, &x) in s.as_slice().iter().enumerate() {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!(x.is_finite() && (x - want).abs() < 1e-300, "{x}");
        }
        let s = sigmoid(&v(&[-30.0, -1.0, 0.0, 1.0, 30.0]));
        for &x in s.as_slice() {
            assert!(x > 0.0 && x < 1.0, "{x}");
        }
    }

    #[test]
    fn cosine_cases() {
        let u = v(&[0.3, -1.2, 4.0]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&Vector::zeros(2), &u.clone()), Err(Error::Config(_))));
        assert!(matches!(cosine(&Vector::zeros(3), &u), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_cases() {
        let n = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&Vector::basis(4, 2)).unwrap(), Vector::basis(4, 2));
        assert!(matches!(l2_normalize(&Vector::zeros(3)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn affine_cases() {
        let x = v(&[1.5, -2.0]);
        assert_eq!(affine(&Matrix::identity(2), &x, &Vector::zeros(2)).unwrap(), x);
        let b = v(&[7.0, 8.0]);
        assert_eq!(affine(&Matrix::zeros(2, 2), &x, &b).unwrap(), b);
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(affine(&w, &v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap().as_slice(), &[4.0, 7.0]);
        assert!(matches!(affine(&w, &v(&[1.0]), &b), Err(Error::Config(_))));
        assert!(matches!(affine(&w, &x, &v(&[1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert!(Matrix::from_col_major(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(Matrix::from_col_major(2, 2, vec![0.0; 3]).is_err());
    }

    fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(m, n)| {
            prop::collection::vec(-1e3..1e3f64, m * n)
                .prop_map(move |d| Matrix::from_col_major(m, n, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn reshape_inverts_vectorize(m in matrix_strategy(64)) {
            let back = Matrix::reshape(&m.vectorize(), m.rows(), m.cols()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn outer_is_rank_one(
            u in prop::collection::vec(-5.0..5.0f64, 2..6),
            w in prop::collection::vec(-5.0..5.0f64, 2..6),
        ) {
            // Gram determinant of any two columns vanishes for a rank-1 matrix,
            // which bounds the second singular value at zero.
            let m = outer(&Vector::new(u).unwrap(), &Vector::new(w).unwrap());
            for a in 0..m.cols() {
                for b in (a + 1)..m.cols() {
                    let (ca, cb) = (m.column(a), m.column(b));
                    let g = dot(ca, ca) * dot(cb, cb) - dot(ca, cb).powi(2);
                    let scale = dot(ca, ca) * dot(cb, cb) + 1.0;
                    prop_assert!(g.abs() / scale < 1e-10);
                }
            }
        }

        #[test]
        fn cosine_and_normalize_are_scale_invariant(
            u in prop::collection::vec(0.1..5.0f64, 1..8),
            c1 in 1e-3..1e3f64,
            c2 in 1e-3..1e3f64,
        ) {
            let u = Vector::new(u).unwrap();
            let w: Vector = Vector::new(u.as_slice().iter().rev().copied().collect()).unwrap();
            let base = cosine(&u, &w).unwrap();
            prop_assert!((cosine(&u.scale(c1), &w.scale(c2)).unwrap() - base).abs() < 1e-10);
            let n = l2_normalize(&u).unwrap();
            let nc = l2_normalize(&u.scale(c1)).unwrap();
            for i in 0..n.len() {
                prop_assert!((n[i] - nc[i]).abs() < 1e-10);
            }
            prop_assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }
}
