//! Rank-R CP factorization by alternating least squares.
//!
//! Each sweep solves the three factor subproblems exactly through their
//! ridge-regularized normal equations. The `R x R` Gram of a Khatri-Rao
//! product is formed as a Hadamard product of small Grams, so the
//! `(I_j I_k) x R` Khatri-Rao matrix itself is never built.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_right_spd;
use crate::matrix::Matrix;
use crate::tensor::{hadamard, mttkrp, residual_sq, CpFactors, Tensor3};

pub use crate::tensor::cp_reconstruct;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsOptions {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop once the relative error changes by less than this between sweeps.
    pub rel_tol: f64,
    pub seed: u64,
    /// Ridge added to the Gram diagonal before each solve.
    pub ridge: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        AlsOptions {
            rank: 1,
            max_iters: 500,
            rel_tol: 1e-8,
            seed: 0,
            ridge: 1e-10,
        }
    }
}

impl AlsOptions {
    pub fn with_rank(rank: usize) -> Self {
        AlsOptions {
            rank,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AlsFit {
    pub factors: CpFactors,
    /// Relative error after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Set when the input was the zero tensor and zero factors were returned.
    pub zero_input: bool,
}

impl AlsFit {
    pub fn final_error(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }
}

/// `‖t − ⟦f⟧‖_F / ‖t‖_F`, or the absolute error when `t` is zero.
pub fn cp_relative_error(t: &Tensor3, f: &CpFactors) -> Result<f64> {
    let [a, b, c] = f.factors();
    let err = residual_sq(t, a, b, c)?.sqrt();
    let norm = t.frobenius_sq().sqrt();
    Ok(if norm > 0.0 { err / norm } else { err })
}

/// Gram of the Khatri-Rao product of `x` and `y` plus `ridge · I`.
pub(crate) fn khatri_rao_gram(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix> {
    let mut g = hadamard(&x.gram(), &y.gram())?;
    for i in 0..g.rows() {
        g[(i, i)] += ridge;
    }
    Ok(g)
}

/// Solves the mode-`mode` least-squares subproblem for the given factors.
pub fn als_update(t: &Tensor3, f: &CpFactors, mode: usize, ridge: f64) -> Result<Matrix> {
    let [a, b, c] = f.factors();
    let (first, second) = match mode {
        1 => (b, c),
        2 => (a, c),
        3 => (a, b),
        m => return Err(Error::InvalidMode(m)),
    };
    let rhs = mttkrp(t, mode, first, second)?;
    let gram = khatri_rao_gram(first, second, ridge)?;
    solve_right_spd(&rhs, &gram)
}

/// Rescales the columns of `mode`'s factor to unit norm and pushes the
/// scale into mode 3, leaving the model unchanged.
fn normalize_into_third(f: &mut CpFactors, mode: usize) {
    let r = f.rank();
    let x = f.factor(mode);
    let norms: Vec<f64> = (0..r)
        .map(|j| (0..x.rows()).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>().sqrt())
        .collect();
    let x = f.factor_mut(mode);
    for i in 0..x.rows() {
        for (v, &n) in x.row_mut(i).iter_mut().zip(&norms) {
            if n > 0.0 {
                *v /= n;
            }
        }
    }
    let c = f.factor_mut(3);
    for i in 0..c.rows() {
        for (v, &n) in c.row_mut(i).iter_mut().zip(&norms) {
            if n > 0.0 {
                *v *= n;
            }
        }
    }
}

pub fn cp_als_fit(t: &Tensor3, opts: &AlsOptions) -> Result<AlsFit> {
    opts.validate()?;
    if !t.is_finite() {
        return Err(Error::NonFinite("input tensor has non-finite entries".into()));
    }
    let (d1, d2, d3) = t.dims();
    let r = opts.rank;
    if t.frobenius_sq() == 0.0 {
        let factors = CpFactors::new(Matrix::zeros(d1, r), Matrix::zeros(d2, r), Matrix::zeros(d3, r))?;
        return Ok(AlsFit {
            factors,
            trace: vec![0.0],
            converged: true,
            zero_input: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a = Matrix::random_normal(d1, r, &mut rng);
    let b = Matrix::random_normal(d2, r, &mut rng);
    let c = Matrix::random_normal(d3, r, &mut rng);
    let mut f = CpFactors::new(a, b, c)?;

    let mut trace = Vec::with_capacity(opts.max_iters);
    let mut converged = false;
    for iter in 0..opts.max_iters {
        for mode in 1..=3 {
            let updated = als_update(t, &f, mode, opts.ridge)?;
            if !updated.is_finite() {
                return Err(Error::Diverged {
                    block: "ALS factor",
                    iteration: iter,
                });
            }
            *f.factor_mut(mode) = updated;
            if mode < 3 {
                normalize_into_third(&mut f, mode);
            }
        }
        let err = cp_relative_error(t, &f)?;
        let change = trace.last().map(|prev: &f64| (prev - err).abs());
        trace.push(err);
        if change.is_some_and(|c| c < opts.rel_tol) {
            converged = true;
            break;
        }
    }
    Ok(AlsFit {
        factors: f,
        trace,
        converged,
        zero_input: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cp_reconstruct;

    fn rank_one(scale: f64) -> (Tensor3, CpFactors) {
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Matrix::from_vec(v.len(), 1, v.into_iter().map(|x| x / n).collect()).unwrap()
        };
        let a = unit(vec![0.3, -1.2, 0.8, 0.1]).scale(scale);
        let b = unit(vec![1.0, 0.4, -0.7]);
        let c = unit(vec![-0.5, 0.9, 0.2, 1.1, 0.6]);
        let f = CpFactors::new(a, b, c).unwrap();
        (cp_reconstruct(&f), f)
    }

    #[test]
    fn recovers_rank_one() {
        let (t, _) = rank_one(5.0);
        let fit = cp_als_fit(&t, &AlsOptions::with_rank(1)).unwrap();
        assert!(fit.final_error() < 1e-6, "error {}", fit.final_error());
        assert!(fit.converged);
    }

    #[test]
    fn zero_tensor_gives_zero_factors() {
        let t = Tensor3::zeros((3, 4, 2)).unwrap();
        let fit = cp_als_fit(&t, &AlsOptions::with_rank(2)).unwrap();
        assert!(fit.zero_input);
        assert_eq!(fit.final_error(), 0.0);
        assert!(fit.factors.factors().iter().all(|m| m.frobenius_sq() == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let t = Tensor3::new((1, 1, 2), vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            cp_als_fit(&t, &AlsOptions::with_rank(1)),
            Err(Error::NonFinite(_))
        ));
        let t = Tensor3::new((1, 1, 1), vec![1.0]).unwrap();
        assert!(cp_als_fit(&t, &AlsOptions::with_rank(0)).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let (t, f) = rank_one(5.0);
        assert!(cp_relative_error(&t, &f).unwrap() < 1e-15);

        let [a, b, c] = f.clone().into_factors();
        let zero = CpFactors::new(a.scale(0.0), b.clone(), c.clone()).unwrap();
        assert!((cp_relative_error(&t, &zero).unwrap() - 1.0).abs() < 1e-15);

        let doubled = CpFactors::new(a.scale(2.0), b, c).unwrap();
        assert!((cp_relative_error(&t, &doubled).unwrap() - 1.0).abs() < 1e-12);

        let wrong = CpFactors::new(Matrix::zeros(2, 1), Matrix::zeros(3, 1), Matrix::zeros(5, 1)).unwrap();
        assert!(cp_relative_error(&t, &wrong).is_err());
    }
}
