//! Small dense solvers for the `R x R` systems that appear in every update.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const JACOBI_MAX_SWEEPS: usize = 100;

fn check_symmetric(a: &Matrix, tol: f64) -> Result<()> {
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::Shape(format!("expected a square matrix, got {n}x{m}")));
    }
    let scale = a.as_slice().iter().fold(1.0_f64, |s, x| s.max(x.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a, 1e-8)?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += m[(i, i)] * m[(i, i)];
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = v.permute_columns(&order)?;
    Ok((values, vectors))
}

pub fn max_eigenvalue(a: &Matrix) -> Result<f64> {
    let (values, _) = symmetric_eigen(a)?;
    values
        .last()
        .copied()
        .ok_or_else(|| Error::Shape("empty matrix has no eigenvalues".into()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix,
/// or `None` if a non-positive pivot is met.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `X · G = B` for `X` with `G` symmetric positive semidefinite.
///
/// Uses Cholesky when `G` is numerically definite and falls back to the
/// eigen-decomposition pseudo-inverse otherwise.
pub fn solve_right_spd(b: &Matrix, g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    if g.cols() != n || b.cols() != n {
        return Err(Error::Shape(format!(
            "cannot solve X·G = B with G {}x{} and B {}x{}",
            g.rows(),
            g.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if let Some(l) = cholesky(g) {
        // each row x of X satisfies G xᵀ = bᵀ since G is symmetric
        let mut out = Matrix::zeros(b.rows(), n);
        let mut y = vec![0.0; n];
        for r in 0..b.rows() {
            let rhs = b.row(r);
            for i in 0..n {
                let mut s = rhs[i];
                for k in 0..i {
                    s -= l[(i, k)] * y[k];
                }
                y[i] = s / l[(i, i)];
            }
            let x = out.row_mut(r);
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in i + 1..n {
                    s -= l[(k, i)] * x[k];
                }
                x[i] = s / l[(i, i)];
            }
        }
        return Ok(out);
    }
    let (values, vectors) = symmetric_eigen(g)?;
    let top = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = top * n as f64 * f64::EPSILON;
    let inv_diag: Vec<f64> = values.iter().map(|&v| if v > cutoff { 1.0 / v } else { 0.0 }).collect();
    let pinv = vectors
        .matmul(&Matrix::from_diag(&inv_diag))?
        .matmul(&vectors.transpose())?;
    b.matmul(&pinv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_diagonal() {
        let a = Matrix::from_diag(&[1.0, 5.0, -2.0]);
        let (values, _) = symmetric_eigen(&a).unwrap();
        assert_eq!(values, vec![-2.0, 1.0, 5.0]);
    }

    #[test]
    fn eigen_reconstructs() {
        let a = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, -0.2], [0.5, -0.2, 2.0]]).unwrap();
        let (values, v) = symmetric_eigen(&a).unwrap();
        let back = v
            .matmul(&Matrix::from_diag(&values))
            .unwrap()
            .matmul(&v.transpose())
            .unwrap();
        assert!(back.max_abs_diff(&a).unwrap() < 1e-12);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(symmetric_eigen(&a).is_err());
    }

    #[test]
    fn solve_spd_and_singular() {
        let g = Matrix::from_rows(&[[4.0, 1.0], [1.0, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
        let b = x.matmul(&g).unwrap();
        let solved = solve_right_spd(&b, &g).unwrap();
        assert!(solved.max_abs_diff(&x).unwrap() < 1e-12);

        // rank-deficient Gram: minimum-norm solution still satisfies X·G = B
        let g = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0, 2.0]]).unwrap();
        let solved = solve_right_spd(&b, &g).unwrap();
        assert!(solved.matmul(&g).unwrap().max_abs_diff(&b).unwrap() < 1e-12);
    }
}
