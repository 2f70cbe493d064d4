//! Dense linear algebra substrate.
//!
//! Row-major matrices and vectors plus the handful of operations the rest of
//! the crate is built on: deterministic matrix products, row norms, the
//! Gram-Schmidt component elimination used by neuron selection, and a cyclic
//! Jacobi eigensolver for the PCA diversity spectra.
//!
//! All loops run in a fixed sequential order, so results are bit-identical
//! across runs for identical inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds from row-major data; errors when the length is off.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "DenseMatrix::from_vec",
                left: format!("{rows}x{cols}"),
                right: format!("data of length {}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "DenseMatrix::from_rows",
                left: format!("{cols} cols"),
                right: "ragged row".into(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// New matrix whose rows are `self`'s rows at `idx`, in that order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    what: "matrix row",
                    index: i,
                    size: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// New matrix whose columns are `self`'s columns at `idx`, in that order.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Self> {
        for &j in idx {
            if j >= self.cols {
                return Err(Error::IndexOutOfRange {
                    what: "matrix column",
                    index: j,
                    size: self.cols,
                });
            }
        }
        let mut out = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (k, &j) in idx.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        Ok(out)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_in_place(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl<T: Scalar> DenseVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> T {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: T) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_in_place(&mut self, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.data.len() {
                return Err(Error::IndexOutOfRange {
                    what: "vector entry",
                    index: i,
                    size: self.data.len(),
                });
            }
            data.push(self.data[i]);
        }
        Ok(Self { data })
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// `a × b`, summation over `k` in ascending order (i-k-j loop).
pub fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a × bᵀ`; same ascending-`k` summation order as [`matmul`].
pub fn matmul_nt<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{} (transposed)", b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ × b`; summation over `a`/`b` rows in ascending order (k-i-j loop).
pub fn matmul_tn<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: format!("{}x{} (transposed)", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// ℓ2 norm of every row.
pub fn row_l2_norms<T: Scalar>(m: &DenseMatrix<T>) -> DenseVector<T> {
    let data = (0..m.rows)
        .map(|i| m.row(i).iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    DenseVector { data }
}

/// Removes the component along row `j` from every row of `v_set`.
///
/// Each row `v_i` becomes `v_i − (v_i·v_j / ‖v_j‖²) v_j`. Row `j` itself is
/// set to exactly zero (its projection onto itself is all of it). Errors when
/// `‖v_j‖² ≤ eps`, which signals a degenerate pivot the caller must handle.
pub fn eliminate_component<T: Scalar>(
    v_set: &DenseMatrix<T>,
    j: usize,
    eps: T,
) -> Result<DenseMatrix<T>> {
    let mut out = v_set.clone();
    eliminate_component_in_place(&mut out, j, eps)?;
    Ok(out)
}

/// In-place variant of [`eliminate_component`], used by the selection loop.
pub fn eliminate_component_in_place<T: Scalar>(
    v_set: &mut DenseMatrix<T>,
    j: usize,
    eps: T,
) -> Result<()> {
    if j >= v_set.rows {
        return Err(Error::IndexOutOfRange {
            what: "pivot row",
            index: j,
            size: v_set.rows,
        });
    }
    let pivot: Vec<T> = v_set.row(j).to_vec();
    let norm_sq = dot(&pivot, &pivot);
    if norm_sq <= eps {
        return Err(Error::DegeneratePivot {
            row: j,
            norm_sq: norm_sq.to_f64_lossy(),
            eps: eps.to_f64_lossy(),
        });
    }
    for i in 0..v_set.rows {
        let row = v_set.row_mut(i);
        if i == j {
            row.fill(T::zero());
            continue;
        }
        let coeff = dot(row, &pivot) / norm_sq;
        for (r, &p) in row.iter_mut().zip(&pivot) {
            *r -= coeff * p;
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix, sorted descending.
///
/// Cyclic Jacobi rotations, iterated until the off-diagonal Frobenius norm
/// drops below `1e-10·‖s‖_F`. Input symmetry is checked up front
/// (`|a_ij − a_ji| ≤ 1e-9·‖s‖_F`).
pub fn sym_eig_descending<T: Scalar>(s: &DenseMatrix<T>) -> Result<DenseVector<T>> {
    if s.rows != s.cols {
        return Err(Error::ShapeMismatch {
            op: "sym_eig_descending",
            left: format!("{}x{}", s.rows, s.cols),
            right: "square matrix required".into(),
        });
    }
    let n = s.rows;
    if n == 0 {
        return Ok(DenseVector::zeros(0));
    }
    let frob = s.frobenius_norm();
    let sym_tol = T::val(1e-9) * frob;
    let mut max_asym = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (s.get(i, j) - s.get(j, i)).abs();
            if d > max_asym {
                max_asym = d;
            }
        }
    }
    if max_asym > sym_tol {
        return Err(Error::NotSymmetric {
            max_asym: max_asym.to_f64_lossy(),
            tol: sym_tol.to_f64_lossy(),
        });
    }

    let mut a = s.clone();
    // Symmetrize exactly so the tolerated asymmetry cannot bias the sweep.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (a.get(i, j) + a.get(j, i)) / T::val(2.0);
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }

    // For f32 a 1e-10 convergence target sits below representable
    // precision; widen to a few ulps of the norm so the sweep terminates.
    let conv_tol = frob * T::val(1e-10).max(T::epsilon() * T::val(8.0));
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        if off_diagonal_norm(&a) <= conv_tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (T::val(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and q.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
            }
        }
    }

    let mut eig: Vec<T> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
    Ok(DenseVector { data: eig })
}

fn off_diagonal_norm<T: Scalar>(a: &DenseMatrix<T>) -> T {
    let n = a.rows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = a.get(i, j);
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}
