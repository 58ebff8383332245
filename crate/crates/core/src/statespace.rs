//! Small dense real-matrix utilities used by the loop and the analytical model.
//!
//! Matrices here are tiny (a handful of states), so everything is stored
//! row-major in a flat `Vec<f64>`. The heavier factorizations (SVD, Schur)
//! are delegated to `nalgebra`; powers and products are computed directly so
//! that they stay independent of those factorizations.

use std::fmt;
use std::ops::Index;

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type ComplexMatrix = DMatrix<Complex64>;

/// Default tolerance used to decide whether a matrix is diagonalizable.
pub const DEFAULT_DIAG_TOLERANCE: f64 = 1e-8;

/// Dense real matrix with finite entries and positive dimensions.
#[derive(Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(nrows * ncols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {ncols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(nrows, ncols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        Self::new(n, n, data)
    }

    pub fn row_vector(entries: &[f64]) -> Result<Self> {
        Self::new(1, entries.len(), entries.to_vec())
    }

    pub fn column_vector(entries: &[f64]) -> Result<Self> {
        Self::new(entries.len(), 1, entries.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(|c| c.to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out = &mut data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(RealMatrix {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }

    /// `out = self * v`. Panics on length mismatch.
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self * v`. Panics on length mismatch.
    pub fn mul_vec_add_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn scaled(&self, factor: f64) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        Ok(RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = 1.0 + self.max_abs();
        (0..self.rows).all(|i| {
            (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale)
        })
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn to_complex(&self) -> ComplexMatrix {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            Complex64::new(self.data[i * self.cols + j], 0.0)
        })
    }
}

impl Index<(usize, usize)> for RealMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        &self.data[r * self.cols + c]
    }
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RealMatrix{:?}", self.to_rows())
    }
}

/// `a^k` by repeated multiplication; `a^0` is the identity.
pub fn mat_power(a: &RealMatrix, k: u32) -> Result<RealMatrix> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let mut out = RealMatrix::identity(a.rows);
    for _ in 0..k {
        out = out.matmul(a)?;
    }
    Ok(out)
}

/// Precomputed powers `a^0 ..= a^max_power`.
#[derive(Debug, Clone)]
pub struct PowerCache {
    powers: Vec<RealMatrix>,
}

impl PowerCache {
    pub fn new(a: &RealMatrix, max_power: u32) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NonSquare {
                rows: a.rows,
                cols: a.cols,
            });
        }
        let mut powers = Vec::with_capacity(max_power as usize + 1);
        powers.push(RealMatrix::identity(a.rows));
        for k in 1..=max_power as usize {
            let next = powers[k - 1].matmul(a)?;
            powers.push(next);
        }
        Ok(Self { powers })
    }

    pub fn get(&self, k: u32) -> Option<&RealMatrix> {
        self.powers.get(k as usize)
    }

    pub fn max_power(&self) -> u32 {
        (self.powers.len() - 1) as u32
    }
}

/// Moore-Penrose pseudo-inverse together with the numerical rank it used.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInverse {
    pub matrix: RealMatrix,
    pub rank: usize,
}

pub fn pseudo_inverse(b: &RealMatrix) -> PseudoInverse {
    let m = b.to_nalgebra();
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let s = &svd.singular_values;
    let smax = s.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let cutoff = (b.rows.max(b.cols) as f64) * f64::EPSILON * smax;

    // The bidiagonal SVD occasionally returns a factorization that does not
    // reproduce its input; check it and fall back when that happens.
    let rebuilt = u * DMatrix::from_diagonal(s) * v_t;
    if (rebuilt - &m).abs().max() > 1e-10 * (1.0 + smax) {
        return pseudo_inverse_augmented(&m);
    }

    let mut pinv = DMatrix::<f64>::zeros(b.cols, b.rows);
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk <= cutoff || sk == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / sk;
        for i in 0..b.cols {
            let vi = v_t[(k, i)] * inv;
            for j in 0..b.rows {
                pinv[(i, j)] += vi * u[(j, k)];
            }
        }
    }
    PseudoInverse {
        matrix: RealMatrix::from_nalgebra(&pinv).expect("pseudo-inverse of finite matrix is finite"),
        rank,
    }
}

// Pseudo-inverse from the symmetric eigenproblem of [[0, B], [B^T, 0]], whose
// positive eigenvalues are the singular values of B with eigenvectors [u; v]/sqrt(2).
fn pseudo_inverse_augmented(m: &DMatrix<f64>) -> PseudoInverse {
    let (r, c) = m.shape();
    let mut aug = DMatrix::<f64>::zeros(r + c, r + c);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = aug.symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = (r.max(c) as f64) * f64::EPSILON * smax * 4.0;
    let mut pinv = DMatrix::<f64>::zeros(c, r);
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        rank += 1;
        let z = eig.eigenvectors.column(k);
        let scale = 2.0 / lambda;
        for i in 0..c {
            for j in 0..r {
                pinv[(i, j)] += scale * z[r + i] * z[j];
            }
        }
    }
    PseudoInverse {
        matrix: RealMatrix::from_nalgebra(&pinv).expect("pseudo-inverse of finite matrix is finite"),
        rank,
    }
}

/// Result of [`eig_decompose`]. `vectors` holds unit-norm eigenvectors as columns
/// in the same order as `values`.
#[derive(Debug, Clone)]
pub struct Eigendecomposition {
    pub values: Vec<Complex64>,
    pub vectors: ComplexMatrix,
    pub diagonalizable: bool,
    /// 2-norm condition number of `vectors`.
    pub condition: f64,
    /// `max |A - P diag(values) P^-1|`, infinite when `P` is singular.
    pub residual: f64,
}

impl Eigendecomposition {
    /// `P Λ^k P^-1`, returned as a complex matrix.
    pub fn reconstruct_power(&self, k: u32) -> Result<ComplexMatrix> {
        let p_inv = self.vectors.clone().try_inverse().ok_or(Error::Singular)?;
        let mut scaled = self.vectors.clone();
        for (j, lambda) in self.values.iter().enumerate() {
            let lk = lambda.powu(k);
            scaled.column_mut(j).iter_mut().for_each(|v| *v *= lk);
        }
        Ok(scaled * p_inv)
    }
}

/// Eigendecomposition with diagonalizability detection.
///
/// Eigenvalues come from a real Schur form. Eigenvalues closer than
/// `sqrt(tol)` (scaled by the matrix magnitude) are grouped and their
/// eigenvectors taken from the numerical null space of `A - λI`; a group whose
/// null space is smaller than its size marks the matrix as defective. The
/// matrix is also reported non-diagonalizable when the eigenvector matrix has
/// condition number above `1/tol` or fails to reconstruct `A`.
pub fn eig_decompose(a: &RealMatrix, tol: f64) -> Result<Eigendecomposition> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let na = a.to_nalgebra();
    let scale = 1.0 + a.max_abs() * n as f64;

    let mut values: Vec<Complex64> = match Schur::try_new(na.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().copied().collect(),
        None => {
            return Ok(Eigendecomposition {
                values: Vec::new(),
                vectors: ComplexMatrix::identity(n, n),
                diagonalizable: false,
                condition: f64::INFINITY,
                residual: f64::INFINITY,
            })
        }
    };
    values.sort_by(|x, y| x.re.total_cmp(&y.re).then(y.im.total_cmp(&x.im)));

    let cluster_tol = tol.sqrt() * scale;
    let mut assigned = vec![false; n];
    let mut ordered = Vec::with_capacity(n);
    let mut vectors = ComplexMatrix::zeros(n, n);
    let mut defective = false;
    let ac = a.to_complex();

    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let members: Vec<usize> = (i..n)
            .filter(|&j| !assigned[j] && (values[j] - values[i]).norm() <= cluster_tol)
            .collect();
        for &j in &members {
            assigned[j] = true;
        }
        let centroid =
            members.iter().map(|&j| values[j]).sum::<Complex64>() / members.len() as f64;

        let mut shifted = ac.clone();
        for d in 0..n {
            shifted[(d, d)] -= centroid;
        }
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));

        let null_dim = order
            .iter()
            .filter(|&&k| svd.singular_values[k] <= cluster_tol)
            .count();
        if null_dim < members.len() {
            defective = true;
        }
        for (slot, &k) in order.iter().take(members.len()).enumerate() {
            let col = ordered.len() + slot;
            let mut v: Vec<Complex64> = (0..n).map(|c| v_t[(k, c)].conj()).collect();
            normalize_phase(&mut v);
            for (r, x) in v.into_iter().enumerate() {
                vectors[(r, col)] = x;
            }
        }
        ordered.extend(members.iter().map(|&j| values[j]));
    }

    let sv = vectors.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    let smin = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };

    let residual = match vectors.clone().try_inverse() {
        Some(p_inv) if condition.is_finite() => {
            let mut scaled = vectors.clone();
            for (j, lambda) in ordered.iter().enumerate() {
                scaled.column_mut(j).iter_mut().for_each(|v| *v *= *lambda);
            }
            let rebuilt = scaled * p_inv;
            (0..n)
                .flat_map(|r| (0..n).map(move |c| (r, c)))
                .map(|(r, c)| (rebuilt[(r, c)] - ac[(r, c)]).norm())
                .fold(0.0, f64::max)
        }
        _ => f64::INFINITY,
    };

    let diagonalizable = !defective
        && condition <= 1.0 / tol
        && residual <= 1e-9 * (1.0 + a.max_abs());

    Ok(Eigendecomposition {
        values: ordered,
        vectors,
        diagonalizable,
        condition,
        residual,
    })
}

// Unit norm, largest-magnitude component real and positive.
fn normalize_phase(v: &mut [Complex64]) {
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let pivot = v
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .unwrap_or(Complex64::new(1.0, 0.0));
    let phase = if pivot.norm() > 0.0 {
        pivot.conj() / pivot.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    for x in v.iter_mut() {
        *x = *x * phase / norm;
    }
}

/// Covariance of `P^-1 w` given `Cov(w) = sigma`: `P^-1 Σ P^-H`.
pub fn transform_covariance(p: &ComplexMatrix, sigma: &RealMatrix) -> Result<ComplexMatrix> {
    if !p.is_square() || p.nrows() != sigma.rows() || !sigma.is_square() {
        return Err(Error::Dimension(format!(
            "similarity {}x{} does not match covariance {}x{}",
            p.nrows(),
            p.ncols(),
            sigma.rows(),
            sigma.cols()
        )));
    }
    let p_inv = p.clone().try_inverse().ok_or(Error::Singular)?;
    if p_inv.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Singular);
    }
    let adj = p_inv.adjoint();
    Ok(&p_inv * sigma.to_complex() * adj)
}

/// Real-valued convenience wrapper around [`transform_covariance`].
pub fn transform_covariance_real(p: &RealMatrix, sigma: &RealMatrix) -> Result<RealMatrix> {
    let out = transform_covariance(&p.to_complex(), sigma)?;
    let re = out.map(|c| c.re);
    RealMatrix::from_nalgebra(&re)
}
