//! Dense symmetric linear algebra.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` at desk scale (n ≤ a
//! few hundred): full eigendecompositions, a Moore–Penrose pseudoinverse,
//! extremal eigenvalues of a symmetric-definite pencil restricted to the
//! complement of the all-ones vector, Horner evaluation of matrix
//! polynomials, PCA and orthogonal Procrustes.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending, eigenvectors as
/// the columns of `eigenvectors` in matching order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        &self.eigenvectors * lambda * self.eigenvectors.transpose()
    }
}

fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// (M + Mᵀ)/2.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn sym_eig(m: &Matrix) -> Result<EigenDecomposition> {
    check_square(m, "matrix")?;
    check_finite(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(EigenDecomposition { eigenvalues: vec![], eigenvectors: Matrix::zeros(0, 0) });
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    check_square(m, "matrix")?;
    check_finite(m)?;
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    Ok(ev.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())))
}

/// Spectral norm of a general (rectangular) matrix via its Gram matrix.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let g = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    let top = symmetrize(&g).symmetric_eigenvalues().iter().fold(0.0f64, |a, &x| a.max(x));
    top.max(0.0).sqrt()
}

/// Moore–Penrose pseudoinverse of a symmetric PSD matrix. Eigenvalues below
/// `1e-10 · λ_max` are treated as zero.
pub fn pseudoinverse(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    let n = m.nrows();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let tol = 1e-10 * lmax;
    let mut out = Matrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol && lambda != 0.0 {
            let v = eig.eigenvectors.column(i);
            out.ger(1.0 / lambda, &v, &v, 1.0);
        }
    }
    Ok(symmetrize(&out))
}

/// Householder vector u with H = I − 2uuᵀ/uᵀu mapping e₀ onto 1/√n. Columns
/// 1..n of H form an orthonormal basis of the complement of the all-ones
/// vector.
fn ones_reflector(n: usize) -> DVector<f64> {
    let s = 1.0 / (n as f64).sqrt();
    let mut u = DVector::from_element(n, -s);
    u[0] += 1.0;
    u
}

/// VᵀMV for the Householder basis V of 1⊥, computed as the trailing block of
/// HMH with two rank-one updates.
pub fn deflate_ones(m: &Matrix) -> Matrix {
    let n = m.nrows();
    if n <= 1 {
        return Matrix::zeros(0, 0);
    }
    let u = ones_reflector(n);
    let uu = u.dot(&u);
    let k = 2.0 / uu;
    // HM = M − k u (uᵀM)
    let utm: RowDVector<f64> = u.transpose() * m;
    let mut hm = m.clone();
    hm.ger(-k, &u, &utm.transpose(), 1.0);
    // (HM)H = HM − k (HM u) uᵀ
    let hmu = &hm * &u;
    hm.ger(-k, &hmu, &u, 1.0);
    symmetrize(&hm.view((1, 1), (n - 1, n - 1)).into_owned())
}

/// Orthonormal basis of 1⊥ as an n×(n−1) matrix (same basis `deflate_ones` uses).
pub fn ones_complement_basis(n: usize) -> Matrix {
    let u = ones_reflector(n);
    let k = 2.0 / u.dot(&u);
    let mut h = Matrix::identity(n, n);
    h.ger(-k, &u, &u, 1.0);
    h.columns(1, n - 1).into_owned()
}

/// Extremal eigenvalues (λ_min, λ_max) of the symmetric-definite pencil
/// (A, B). With `deflate_ones`, both matrices are first restricted to the
/// orthogonal complement of the all-ones vector.
pub fn generalized_extremal_eigs(a: &Matrix, b: &Matrix, deflate: bool) -> Result<(f64, f64)> {
    check_square(a, "A")?;
    check_square(b, "B")?;
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("A is {:?}, B is {:?}", a.shape(), b.shape())));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (ar, br) = if deflate { (deflate_ones(a), deflate_ones(b)) } else { (symmetrize(a), symmetrize(b)) };
    if ar.nrows() == 0 {
        return Err(Error::InvalidInput("pencil has empty domain".into()));
    }
    let scale = br.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let chol = br.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    // relative pivot check: Cholesky succeeds on numerically singular matrices
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |a, &x| a.min(x));
    if !(min_pivot * min_pivot > 1e-12 * scale) {
        return Err(Error::NotPositiveDefinite);
    }
    // C = L⁻¹ A L⁻ᵀ
    let x = l.solve_lower_triangular(&ar).ok_or(Error::NotPositiveDefinite)?;
    let c = l.solve_lower_triangular(&x.transpose()).ok_or(Error::NotPositiveDefinite)?;
    let ev = sym_eigenvalues(&symmetrize(&c))?;
    Ok((ev[0], ev[ev.len() - 1]))
}

/// Σ_r a_r Mʳ by Horner's rule.
pub fn matrix_polynomial(coeffs: &[f64], m: &Matrix) -> Result<Matrix> {
    check_square(m, "matrix")?;
    let n = m.nrows();
    let Some((&last, rest)) = coeffs.split_last() else {
        return Err(Error::InvalidInput("polynomial needs at least one coefficient".into()));
    };
    let mut acc = Matrix::identity(n, n) * last;
    for &a in rest.iter().rev() {
        acc = m * acc;
        for i in 0..n {
            acc[(i, i)] += a;
        }
    }
    Ok(acc)
}

/// Scalar polynomial evaluation, Horner.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: RowDVector<f64>,
    /// d×k, orthonormal columns.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

pub fn column_mean(z: &Matrix) -> RowDVector<f64> {
    let n = z.nrows().max(1) as f64;
    z.row_sum() / n
}

/// Principal directions of the mean-centered rows of `z` (covariance divisor n).
/// Component signs are fixed so the largest-magnitude coordinate is positive.
pub fn pca_fit(z: &Matrix, k: usize) -> Result<PcaBasis> {
    let (n, d) = z.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidInput(format!("pca rank {k} must be in 1..={}", n.min(d))));
    }
    let mean = column_mean(z);
    let mut centered = z.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = sym_eig(&cov)?;
    let mut components = Matrix::zeros(d, k);
    let mut explained_variance = Vec::with_capacity(k);
    for j in 0..k {
        let src = d - 1 - j;
        let mut v = eig.eigenvectors.column(src).into_owned();
        let pivot = v.iter().copied().fold((0.0f64, 0.0f64), |(best, val), x| {
            if x.abs() > best { (x.abs(), x) } else { (best, val) }
        });
        if pivot.1 < 0.0 {
            v.neg_mut();
        }
        components.set_column(j, &v);
        explained_variance.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(PcaBasis { mean, components, explained_variance })
}

/// Coordinates of the rows of `z` in the basis, after subtracting the fitted mean.
pub fn pca_project(basis: &PcaBasis, z: &Matrix) -> Result<Matrix> {
    if z.ncols() != basis.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "basis fitted on {} columns, got {}",
            basis.mean.len(),
            z.ncols()
        )));
    }
    let mut centered = z.clone();
    for mut row in centered.row_iter_mut() {
        row -= &basis.mean;
    }
    Ok(centered * &basis.components)
}

/// Orthogonal Q minimizing ‖B·Q − A‖_F, and the attained residual.
pub fn orthogonal_procrustes(a: &Matrix, b: &Matrix) -> Result<(Matrix, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("A is {:?}, B is {:?}", a.shape(), b.shape())));
    }
    check_finite(a)?;
    check_finite(b)?;
    let m = b.transpose() * a;
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::NonFinite);
    };
    let q = u * v_t;
    let residual = (b * &q - a).norm();
    Ok((q, residual))
}
