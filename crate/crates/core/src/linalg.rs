//! Small dense linear algebra: row-major matrices, cyclic Jacobi eigen-decomposition
//! for symmetric matrices, singular values through the Gram matrix, and a Cholesky
//! solve. Sizes in this crate are at most a few hundred, so nothing here is blocked
//! or vectorized.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{DcpError, Result};

/// Tolerance on `|S - Sᵀ|` accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Jacobi stops once the off-diagonal Frobenius mass drops below this fraction of `‖S‖_F`.
const JACOBI_REL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of `M Mᵀ` below this fraction of the largest one count as zero. The
/// cut is applied before the square root, where Jacobi's absolute error lives.
pub const SINGULAR_ZERO_REL: f64 = 1e-9;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch in mul_vec");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|S_ij - S_ji|`; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Eigenvalues in descending order with matching unit eigenvectors (columns of `vectors`).
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn vector(&self, idx: usize) -> Vec<f64> {
        (0..self.vectors.rows()).map(|i| self.vectors[(i, idx)]).collect()
    }
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if !s.is_square() {
        return Err(DcpError::Linalg(format!(
            "expected a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let asymmetry = s.asymmetry();
    if asymmetry > SYMMETRY_TOL {
        return Err(DcpError::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Cyclic Jacobi rotations on a symmetric matrix.
pub fn symmetric_eigen(s: &Matrix) -> Result<SymmetricEigen> {
    check_symmetric(s)?;
    let n = s.rows();
    let mut a = s.clone();
    // symmetrize away sub-tolerance noise so rotations stay exact similarity transforms
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = s.frobenius_norm();
    let target = JACOBI_REL_TOL * scale;

    let off_norm = |a: &Matrix| {
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += a[(i, j)] * a[(i, j)];
                }
            }
        }
        sum.sqrt()
    };

    let mut converged = scale == 0.0 || off_norm(&a) <= target;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn);
            }
        }
        sweep += 1;
        converged = off_norm(&a) <= target;
    }
    if !converged {
        return Err(DcpError::Linalg(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[(row, col)] = v[(row, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Applies the rotation zeroing `a[p][q]` as `Jᵀ A J`, accumulating `V ← V J`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// All eigenvalues of a symmetric matrix, descending.
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(s)?.values)
}

/// `(sigma_max, sigma_min_nonzero)` from the eigenvalues of `M Mᵀ`.
pub fn singular_values(m: &Matrix) -> Result<(f64, f64)> {
    if m.rows() == 0 || m.cols() == 0 || m.frobenius_norm() == 0.0 {
        return Err(DcpError::Linalg("singular values of an all-zero matrix".into()));
    }
    let gram = m.matmul(&m.transpose());
    let eig = symmetric_eigenvalues(&gram)?;
    let sigma_max = eig[0].max(0.0).sqrt();
    let sigma_min = eig
        .iter()
        .copied()
        .filter(|&l| l > SINGULAR_ZERO_REL * eig[0])
        .fold(f64::INFINITY, f64::min)
        .sqrt();
    Ok((sigma_max, sigma_min))
}

/// Solves `S x = b` for symmetric positive definite `S` by Cholesky factorization.
pub fn solve_spd(s: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_symmetric(s)?;
    let n = s.rows();
    if b.len() != n {
        return Err(DcpError::Linalg("right-hand side length mismatch".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return Err(DcpError::Linalg("matrix is not positive definite".into()));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut x = s[(i, j)];
            for k in 0..j {
                x -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = x / d;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut x = b[i];
        for k in 0..i {
            x -= l[(i, k)] * y[k];
        }
        y[i] = x / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    Ok(x)
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn identity_eigenvalues() {
        let vals = symmetric_eigenvalues(&Matrix::identity(3)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_sorted_descending() {
        let vals = symmetric_eigenvalues(&Matrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // λ² - 4λ + 3 = 0
        let vals = symmetric_eigenvalues(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]])).unwrap();
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(symmetric_eigen(&m), Err(DcpError::NotSymmetric { .. })));
    }

    #[test]
    fn eigenpair_residuals_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 17, 40] {
            let s = random_symmetric(n, &mut rng);
            let eig = symmetric_eigen(&s).unwrap();
            let scale = s.frobenius_norm();
            for (idx, &lambda) in eig.values.iter().enumerate() {
                let v = eig.vector(idx);
                let sv = s.mul_vec(&v);
                let res: f64 = sv.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
                assert!(res <= 1e-8 * scale, "n={n} residual {res}");
            }
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn singular_values_column_pair() {
        let m = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let (hi, lo) = singular_values(&m).unwrap();
        assert_abs_diff_eq!(hi, 2f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(lo, 2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn singular_values_identity() {
        let (hi, lo) = singular_values(&Matrix::identity(4)).unwrap();
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lo, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_values_reject_zero() {
        assert!(singular_values(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn cholesky_solves() {
        let s = Matrix::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 2.0]]);
        let x = solve_spd(&s, &[1.0, 2.0, 3.0]).unwrap();
        let back = s.mul_vec(&x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*b, e, epsilon = 1e-12);
        }
        assert!(solve_spd(&Matrix::from_rows(&[vec![0.0]]), &[1.0]).is_err());
    }
}
