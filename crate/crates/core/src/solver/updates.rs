//! Single-block updates of the consensus embedding solver.
//!
//! Every block subproblem (H, P and F) is a quadratic of the form
//! `tr(X A Xᵀ) − tr(Bᵀ X)` with `A` symmetric positive definite. It is
//! minimized by proximal gradient steps `X ← X − (2XA − B)/L` where `L` is
//! the largest eigenvalue of `2A`, which makes each step a descent step.

use crate::error::{Error, Result};
use crate::linalg::max_eigenvalue;
use crate::matrix::Matrix;
use crate::tensor::{hadamard, mttkrp, Tensor3};

/// Factors and multipliers belonging to one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewState {
    /// Node factor `H` (M x R).
    pub h: Matrix,
    /// Auxiliary copy `P` of `H` (M x R).
    pub p: Matrix,
    /// Lagrange multiplier `U` for `H = P` (M x R).
    pub u: Matrix,
    /// Subject factor `F` (N x R).
    pub f: Matrix,
}

impl ViewState {
    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.p.is_finite() && self.u.is_finite() && self.f.is_finite()
    }

    /// `‖H − P‖_F / max(1, ‖H‖_F)`
    pub fn coupling_residual(&self) -> f64 {
        let diff = self.h.sub(&self.p).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY);
        diff / self.h.frobenius_norm().max(1.0)
    }

    pub(crate) fn check_shapes(&self, m: usize, n: usize, r: usize) -> Result<()> {
        for (name, mat, rows) in [
            ("H", &self.h, m),
            ("P", &self.p, m),
            ("U", &self.u, m),
            ("F", &self.f, n),
        ] {
            if mat.shape() != (rows, r) {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{r}",
                    mat.rows(),
                    mat.cols()
                )));
            }
        }
        Ok(())
    }
}

/// The quadratic `tr(X A Xᵀ) − tr(Bᵀ X)` of one block subproblem.
#[derive(Clone, Debug)]
pub struct QuadraticBlock {
    pub a: Matrix,
    pub b: Matrix,
}

impl QuadraticBlock {
    pub fn objective(&self, x: &Matrix) -> Result<f64> {
        let xa = x.matmul(&self.a)?;
        Ok(xa.dot(x)? - self.b.dot(x)?)
    }

    /// `2XA − B`
    pub fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = x.matmul(&self.a)?.scale(2.0);
        g.axpy(-1.0, &self.b)?;
        Ok(g)
    }

    pub fn lipschitz(&self) -> Result<f64> {
        lipschitz_of(&self.a)
    }

    /// Applies `steps` proximal gradient steps starting from `x`.
    pub fn descend(&self, x: &Matrix, steps: usize) -> Result<Matrix> {
        let l = self.lipschitz()?;
        let mut x = x.clone();
        for _ in 0..steps {
            let g = self.gradient(&x)?;
            x.axpy(-1.0 / l, &g)?;
        }
        Ok(x)
    }
}

/// Largest eigenvalue of `2A` for a symmetric `A`.
pub fn lipschitz_of(a: &Matrix) -> Result<f64> {
    let l = 2.0 * max_eigenvalue(a)?;
    if !(l > 0.0) {
        return Err(Error::ZeroLipschitz(l));
    }
    Ok(l)
}

fn add_diagonal(mut a: Matrix, value: f64) -> Matrix {
    for i in 0..a.rows() {
        a[(i, i)] += value;
    }
    a
}

/// H subproblem: `A = (FᵀF)∗(PᵀP) + (μ/2)I`, `B = 2 X_(1) (F ⊙ P) + μP − U`.
pub fn h_block(x: &Tensor3, view: &ViewState, mu: f64) -> Result<QuadraticBlock> {
    let a = add_diagonal(hadamard(&view.f.gram(), &view.p.gram())?, 0.5 * mu);
    let mut b = mttkrp(x, 1, &view.p, &view.f)?.scale(2.0);
    b.axpy(mu, &view.p)?;
    b.axpy(-1.0, &view.u)?;
    Ok(QuadraticBlock { a, b })
}

/// P subproblem: `A = (FᵀF)∗(HᵀH) + (μ/2)I`, `B = 2 X_(2) (F ⊙ H) + μH + U`.
pub fn p_block(x: &Tensor3, view: &ViewState, mu: f64) -> Result<QuadraticBlock> {
    let a = add_diagonal(hadamard(&view.f.gram(), &view.h.gram())?, 0.5 * mu);
    let mut b = mttkrp(x, 2, &view.h, &view.f)?.scale(2.0);
    b.axpy(mu, &view.h)?;
    b.axpy(1.0, &view.u)?;
    Ok(QuadraticBlock { a, b })
}

/// Per-view F subproblem: `A = (PᵀP)∗(HᵀH) + λI`, `B = 2 X_(3) (P ⊙ H) + 2λF*`.
///
/// With `consensus = None` the consensus term is dropped entirely.
pub fn f_block(x: &Tensor3, view: &ViewState, consensus: Option<(f64, &Matrix)>) -> Result<QuadraticBlock> {
    let mut a = hadamard(&view.p.gram(), &view.h.gram())?;
    let mut b = mttkrp(x, 3, &view.h, &view.p)?.scale(2.0);
    if let Some((lambda, f_star)) = consensus {
        a = add_diagonal(a, lambda);
        b.axpy(2.0 * lambda, f_star)?;
    }
    Ok(QuadraticBlock { a, b })
}

/// Shared-F subproblem summed over views: `A = Σ JᵥᵀJᵥ`, `B = Σ 2 X⁽ᵛ⁾_(3) Jᵥ`.
pub fn shared_f_block(views: &[(&Tensor3, &ViewState)]) -> Result<QuadraticBlock> {
    let mut blocks = views.iter().map(|(x, v)| f_block(x, v, None));
    let mut total = blocks
        .next()
        .ok_or_else(|| Error::InvalidArgument("no views".into()))??;
    for blk in blocks {
        let blk = blk?;
        total.a.axpy(1.0, &blk.a)?;
        total.b.axpy(1.0, &blk.b)?;
    }
    Ok(total)
}

pub fn update_h(x: &Tensor3, view: &ViewState, mu: f64, steps: usize) -> Result<Matrix> {
    h_block(x, view, mu)?.descend(&view.h, steps)
}

pub fn update_p(x: &Tensor3, view: &ViewState, mu: f64, steps: usize) -> Result<Matrix> {
    p_block(x, view, mu)?.descend(&view.p, steps)
}

/// `U + μ(H − P)`
pub fn update_u(view: &ViewState, mu: f64) -> Result<Matrix> {
    let mut u = view.u.clone();
    u.axpy(mu, &view.h)?;
    u.axpy(-mu, &view.p)?;
    Ok(u)
}

pub fn update_f_view(x: &Tensor3, view: &ViewState, lambda: f64, consensus: &Matrix, steps: usize) -> Result<Matrix> {
    f_block(x, view, Some((lambda, consensus)))?.descend(&view.f, steps)
}

/// `F* = Σ λᵥ F⁽ᵛ⁾ / Σ λᵥ`, the minimizer of `Σ λᵥ ‖F⁽ᵛ⁾ − F*‖²`.
pub fn update_f_star(f_views: &[&Matrix], lambdas: &[f64]) -> Result<Matrix> {
    let first = f_views
        .first()
        .ok_or_else(|| Error::InvalidArgument("consensus needs at least one view".into()))?;
    if f_views.len() != lambdas.len() {
        return Err(Error::Shape(format!(
            "{} subject factors but {} weights",
            f_views.len(),
            lambdas.len()
        )));
    }
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument("view weights must be positive".into()));
    }
    let total: f64 = lambdas.iter().sum();
    // anchored at the first view so that one view, or identical views,
    // reproduce that factor bit for bit
    let mut acc = (*first).clone();
    for (f, &l) in f_views.iter().zip(lambdas).skip(1) {
        acc.axpy(l / total, &f.sub(first)?)?;
    }
    Ok(acc)
}
