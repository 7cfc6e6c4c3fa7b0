//! Consensus embedding of multi-view partially-symmetric tensors.
//!
//! Each view `X⁽ᵛ⁾ (M_v x M_v x N)` is modelled as `⟦H⁽ᵛ⁾, H⁽ᵛ⁾, F⁽ᵛ⁾⟧`. The
//! quartic dependence on `H` is split by an auxiliary copy `P = H` enforced
//! with an augmented Lagrangian, and the per-view subject factors are pulled
//! towards a shared consensus `F*`:
//!
//! ```text
//! min Σᵥ ‖X⁽ᵛ⁾ − ⟦H⁽ᵛ⁾, H⁽ᵛ⁾, F⁽ᵛ⁾⟧‖² + Σᵥ λᵥ ‖F⁽ᵛ⁾ − F*‖²
//! ```
//!
//! One outer iteration updates, per view, `H`, `P` (proximal steps), `U`
//! (dual ascent) and `F` (proximal step), then sets `F*` to the λ-weighted
//! mean of the `F⁽ᵛ⁾`. Views are processed in parallel; results do not
//! depend on scheduling.
//!
//! Two ablations share the machinery: [`Method::DirectShared`] fits one `F`
//! used by every view, and [`Method::TwoStep`] fits views independently and
//! averages afterwards.

mod updates;

pub use updates::{
    f_block, h_block, lipschitz_of, p_block, shared_f_block, update_f_star, update_f_view, update_h, update_p,
    update_u, QuadraticBlock, ViewState,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{check_partial_symmetry, residual_sq, GraphViewTensor, DEFAULT_SYMMETRY_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Soft consensus across per-view subject factors.
    #[serde(rename = "m2e")]
    Consensus,
    /// One subject factor shared by all views.
    #[serde(rename = "m2e-ds")]
    DirectShared,
    /// Independent per-view factorizations, averaged afterwards.
    #[serde(rename = "m2e-ts")]
    TwoStep,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Consensus => "m2e",
            Method::DirectShared => "m2e-ds",
            Method::TwoStep => "m2e-ts",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m2e" => Ok(Method::Consensus),
            "m2e-ds" => Ok(Method::DirectShared),
            "m2e-ts" => Ok(Method::TwoStep),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// How the starting penalty is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuPolicy {
    /// Scale the penalty to the data: `μ₀ = 3 (mean ‖X⁽ᵛ⁾‖² / R)^(2/3)`.
    /// This tracks the curvature of the `H` and `P` blocks, so the iterates
    /// behave the same whatever the units of the affinities.
    #[default]
    Auto,
    /// Use `mu` as given.
    Fixed,
}

pub const AUTO_MU_FACTOR: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct M2eConfig {
    /// View weights `λᵥ`, one per view.
    pub lambdas: Vec<f64>,
    pub rank: usize,
    /// Augmented Lagrangian penalty, used as is under [`MuPolicy::Fixed`]
    /// and as the fallback for all-zero data under [`MuPolicy::Auto`].
    pub mu: f64,
    pub mu_policy: MuPolicy,
    /// Penalty multiplier applied after each outer iteration.
    pub mu_growth: f64,
    pub mu_max: f64,
    /// Proximal gradient steps per block per outer iteration.
    pub inner_steps: usize,
    pub max_outer_iters: usize,
    pub obj_rel_tol: f64,
    pub residual_tol: f64,
    pub seed: u64,
    /// Explicit per-view initialization seeds; derived from `seed` when absent.
    pub view_seeds: Option<Vec<u64>>,
    pub symmetry_tol: f64,
}

impl Default for M2eConfig {
    fn default() -> Self {
        M2eConfig {
            lambdas: vec![1.0, 1.0],
            rank: 2,
            mu: 10.0,
            mu_policy: MuPolicy::Auto,
            mu_growth: 1.0,
            mu_max: 1e6,
            inner_steps: 1,
            max_outer_iters: 500,
            obj_rel_tol: 1e-6,
            residual_tol: 1e-3,
            seed: 0,
            view_seeds: None,
            symmetry_tol: DEFAULT_SYMMETRY_TOL,
        }
    }
}

impl M2eConfig {
    pub fn new(lambdas: Vec<f64>, rank: usize) -> Self {
        M2eConfig {
            lambdas,
            rank,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.lambdas.is_empty() {
            return bad("at least one view weight is required");
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return bad("view weights must be positive and finite");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be positive");
        }
        if !(self.mu_growth >= 1.0) {
            return bad("mu_growth must be at least 1");
        }
        if !(self.mu_max >= self.mu) {
            return bad("mu_max must be at least mu");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be at least 1");
        }
        if !(self.obj_rel_tol > 0.0) || !(self.residual_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.symmetry_tol >= 0.0) {
            return bad("symmetry_tol must be non-negative");
        }
        if let Some(seeds) = &self.view_seeds {
            if seeds.len() != self.lambdas.len() {
                return bad("view_seeds must have one entry per view");
            }
        }
        Ok(())
    }

    /// Penalty at the first iteration for these views.
    pub fn initial_mu(&self, views: &[GraphViewTensor]) -> f64 {
        match self.mu_policy {
            MuPolicy::Fixed => self.mu,
            MuPolicy::Auto => {
                let mean_sq = views.iter().map(|x| x.tensor().frobenius_sq()).sum::<f64>() / views.len().max(1) as f64;
                let mu = AUTO_MU_FACTOR * (mean_sq / self.rank as f64).powf(2.0 / 3.0);
                if mu > 0.0 && mu.is_finite() {
                    mu
                } else {
                    self.mu
                }
            }
        }
    }

    pub fn view_seed(&self, view: usize) -> u64 {
        match &self.view_seeds {
            Some(seeds) => seeds[view],
            None => self
                .seed
                .wrapping_add((view as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }
}

/// Full iterate of the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct M2eState {
    pub views: Vec<ViewState>,
    /// Consensus embedding `F*` (N x R).
    pub consensus: Matrix,
    pub mu: f64,
    pub iteration: usize,
}

impl M2eState {
    pub fn coupling_residual(&self) -> f64 {
        self.views.iter().map(ViewState::coupling_residual).fold(0.0, f64::max)
    }

    /// Reorders the rank columns of every matrix in the state.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<M2eState> {
        let views = self
            .views
            .iter()
            .map(|v| {
                Ok(ViewState {
                    h: v.h.permute_columns(perm)?,
                    p: v.p.permute_columns(perm)?,
                    u: v.u.permute_columns(perm)?,
                    f: v.f.permute_columns(perm)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(M2eState {
            views,
            consensus: self.consensus.permute_columns(perm)?,
            mu: self.mu,
            iteration: self.iteration,
        })
    }
}

fn check_state_shapes(views: &[GraphViewTensor], state: &M2eState, lambdas: &[f64]) -> Result<()> {
    if views.len() != state.views.len() || views.len() != lambdas.len() {
        return Err(Error::Shape(format!(
            "{} views, {} view states, {} weights",
            views.len(),
            state.views.len(),
            lambdas.len()
        )));
    }
    let (n, r) = state.consensus.shape();
    for (x, v) in views.iter().zip(&state.views) {
        if x.subject_count() != n {
            return Err(Error::Shape(format!(
                "view has {} subjects, consensus has {n} rows",
                x.subject_count()
            )));
        }
        v.check_shapes(x.node_count(), n, r)?;
    }
    Ok(())
}

/// Reconstruction term `Σᵥ ‖X⁽ᵛ⁾ − ⟦H⁽ᵛ⁾, P⁽ᵛ⁾, F⁽ᵛ⁾⟧‖²`.
pub fn reconstruction_value(views: &[GraphViewTensor], state: &M2eState) -> Result<f64> {
    views
        .iter()
        .zip(&state.views)
        .map(|(x, v)| residual_sq(x.tensor(), &v.h, &v.p, &v.f))
        .sum()
}

/// `Σᵥ ‖X⁽ᵛ⁾ − ⟦H⁽ᵛ⁾, P⁽ᵛ⁾, F⁽ᵛ⁾⟧‖² + Σᵥ λᵥ ‖F⁽ᵛ⁾ − F*‖²`.
pub fn objective_value(views: &[GraphViewTensor], state: &M2eState, lambdas: &[f64]) -> Result<f64> {
    check_state_shapes(views, state, lambdas)?;
    let recon = reconstruction_value(views, state)?;
    let mut consensus = 0.0;
    for (v, &l) in state.views.iter().zip(lambdas) {
        consensus += l * v.f.sub(&state.consensus)?.frobenius_sq();
    }
    Ok(recon + consensus)
}

/// Before/after value of one block's quadratic subproblem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDescent {
    /// `None` for the shared F block.
    pub view: Option<usize>,
    pub block: &'static str,
    pub before: f64,
    pub after: f64,
}

impl BlockDescent {
    pub fn increase(&self) -> f64 {
        self.after - self.before
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
    pub descents: Vec<BlockDescent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct M2eSolution {
    pub method: Method,
    /// Consensus embedding `F*` (N x R).
    pub consensus: Matrix,
    /// Per-view node factors `(H + P)/2`.
    pub node_factors: Vec<Matrix>,
    /// Per-view subject factors `F⁽ᵛ⁾`.
    pub subject_factors: Vec<Matrix>,
    /// Objective of the running method per outer iteration, evaluated with `⟦H, P, F⟧`.
    pub objective_trace: Vec<f64>,
    /// `maxᵥ ‖H⁽ᵛ⁾ − P⁽ᵛ⁾‖ / max(1, ‖H⁽ᵛ⁾‖)` per outer iteration.
    pub residual_trace: Vec<f64>,
    /// Consensus objective re-evaluated with the symmetrized node factors.
    pub final_objective: f64,
    /// `Σᵥ ‖X⁽ᵛ⁾‖²`
    pub data_norm_sq: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_mu: f64,
}

impl M2eSolution {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(0.0)
    }

    pub fn relative_objective(&self) -> f64 {
        if self.data_norm_sq > 0.0 {
            self.final_objective / self.data_norm_sq
        } else {
            self.final_objective
        }
    }
}

/// Runs the solver loop one outer iteration at a time.
pub struct Solver<'a> {
    views: &'a [GraphViewTensor],
    config: M2eConfig,
    method: Method,
    state: M2eState,
    data_norm_sq: f64,
    objective_trace: Vec<f64>,
    residual_trace: Vec<f64>,
    converged: bool,
    mu_cap: f64,
}

fn validate_views(views: &[GraphViewTensor], config: &M2eConfig) -> Result<usize> {
    config.validate()?;
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one view is required".into()))?;
    if views.len() != config.lambdas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views but {} view weights",
            views.len(),
            config.lambdas.len()
        )));
    }
    let n = first.subject_count();
    for (v, x) in views.iter().enumerate() {
        if x.subject_count() != n {
            return Err(Error::SubjectMismatch {
                first: "view 0".into(),
                first_n: n,
                second: format!("view {v}"),
                second_n: x.subject_count(),
            });
        }
        let check = check_partial_symmetry(x.tensor(), config.symmetry_tol)?;
        if !check.symmetric {
            return Err(Error::Asymmetric {
                slice: check.worst_slice,
                asymmetry: check.max_asymmetry,
                tol: config.symmetry_tol,
            });
        }
    }
    Ok(n)
}

/// `H, F ~ N(0, 1)` from the view's seed, `P = H`, `U = 0`.
fn init_view(m: usize, n: usize, r: usize, seed: u64) -> ViewState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Matrix::random_normal(m, r, &mut rng);
    let f = Matrix::random_normal(n, r, &mut rng);
    ViewState {
        p: h.clone(),
        u: Matrix::zeros(m, r),
        h,
        f,
    }
}

fn diverged(block: &'static str, iteration: usize, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { block, iteration })
    }
}

impl<'a> Solver<'a> {
    pub fn new(views: &'a [GraphViewTensor], config: M2eConfig, method: Method) -> Result<Self> {
        let n = validate_views(views, &config)?;
        let r = config.rank;
        let mut view_states: Vec<ViewState> = views
            .iter()
            .enumerate()
            .map(|(v, x)| init_view(x.node_count(), n, r, config.view_seed(v)))
            .collect();
        if method == Method::DirectShared {
            let shared = view_states[0].f.clone();
            for vs in &mut view_states {
                vs.f = shared.clone();
            }
        }
        let fs: Vec<&Matrix> = view_states.iter().map(|v| &v.f).collect();
        let consensus = update_f_star(&fs, &config.lambdas)?;
        let data_norm_sq = views.iter().map(|x| x.tensor().frobenius_sq()).sum();
        let mu = config.initial_mu(views);
        let state = M2eState {
            views: view_states,
            consensus,
            mu,
            iteration: 0,
        };
        Ok(Solver {
            views,
            method,
            state,
            data_norm_sq,
            objective_trace: Vec::with_capacity(config.max_outer_iters),
            residual_trace: Vec::with_capacity(config.max_outer_iters),
            converged: false,
            mu_cap: config.mu_max.max(mu),
            config,
        })
    }

    pub fn state(&self) -> &M2eState {
        &self.state
    }

    pub fn config(&self) -> &M2eConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// The quantity traced for the running method: the consensus objective
    /// for [`Method::Consensus`], the reconstruction term otherwise.
    pub fn traced_objective(&self) -> Result<f64> {
        match self.method {
            Method::Consensus => objective_value(self.views, &self.state, &self.config.lambdas),
            Method::DirectShared | Method::TwoStep => reconstruction_value(self.views, &self.state),
        }
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let mu = self.state.mu;
        let steps = self.config.inner_steps;
        let method = self.method;
        let lambdas = &self.config.lambdas;
        let consensus = &self.state.consensus;

        let per_view: Vec<Vec<BlockDescent>> = self
            .state
            .views
            .par_iter_mut()
            .zip(self.views.par_iter())
            .enumerate()
            .map(|(v, (vs, x))| -> Result<Vec<BlockDescent>> {
                let x = x.tensor();
                let mut descents = Vec::with_capacity(3);

                let blk = h_block(x, vs, mu)?;
                let h = blk.descend(&vs.h, steps)?;
                diverged("H", it, &h)?;
                descents.push(BlockDescent {
                    view: Some(v),
                    block: "H",
                    before: blk.objective(&vs.h)?,
                    after: blk.objective(&h)?,
                });
                vs.h = h;

                let blk = p_block(x, vs, mu)?;
                let p = blk.descend(&vs.p, steps)?;
                diverged("P", it, &p)?;
                descents.push(BlockDescent {
                    view: Some(v),
                    block: "P",
                    before: blk.objective(&vs.p)?,
                    after: blk.objective(&p)?,
                });
                vs.p = p;

                vs.u = update_u(vs, mu)?;
                diverged("U", it, &vs.u)?;

                if method != Method::DirectShared {
                    let coupling = match method {
                        Method::Consensus => Some((lambdas[v], consensus)),
                        _ => None,
                    };
                    let blk = f_block(x, vs, coupling)?;
                    let f = blk.descend(&vs.f, steps)?;
                    diverged("F", it, &f)?;
                    descents.push(BlockDescent {
                        view: Some(v),
                        block: "F",
                        before: blk.objective(&vs.f)?,
                        after: blk.objective(&f)?,
                    });
                    vs.f = f;
                }
                Ok(descents)
            })
            .collect::<Result<_>>()?;
        let mut descents: Vec<BlockDescent> = per_view.into_iter().flatten().collect();

        if method == Method::DirectShared {
            let pairs: Vec<_> = self
                .views
                .iter()
                .map(GraphViewTensor::tensor)
                .zip(&self.state.views)
                .collect();
            let blk = shared_f_block(&pairs)?;
            let current = &self.state.views[0].f;
            let f = blk.descend(current, steps)?;
            diverged("F", it, &f)?;
            descents.push(BlockDescent {
                view: None,
                block: "F",
                before: blk.objective(current)?,
                after: blk.objective(&f)?,
            });
            for vs in &mut self.state.views {
                vs.f = f.clone();
            }
            self.state.consensus = f;
        } else {
            let fs: Vec<&Matrix> = self.state.views.iter().map(|v| &v.f).collect();
            self.state.consensus = update_f_star(&fs, lambdas)?;
        }
        diverged("F*", it, &self.state.consensus)?;

        self.state.mu = (mu * self.config.mu_growth).min(self.mu_cap);
        self.state.iteration += 1;

        let objective = self.traced_objective()?;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                block: "objective",
                iteration: it,
            });
        }
        let residual = self.state.coupling_residual();
        let previous = self.objective_trace.last().copied();
        self.objective_trace.push(objective);
        self.residual_trace.push(residual);

        let exact_fit = objective <= 1e-14 * self.data_norm_sq;
        let settled = previous
            .is_some_and(|prev| (prev - objective).abs() < self.config.obj_rel_tol * prev.abs().max(f64::MIN_POSITIVE));
        if (settled || exact_fit) && residual < self.config.residual_tol {
            self.converged = true;
        }

        Ok(StepReport {
            iteration: it,
            objective,
            residual,
            descents,
        })
    }

    /// Iterates until convergence or the iteration cap, then assembles the solution.
    pub fn run(mut self) -> Result<M2eSolution> {
        while !self.converged && self.state.iteration < self.config.max_outer_iters {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<M2eSolution> {
        let node_factors: Vec<Matrix> = self
            .state
            .views
            .iter()
            .map(|v| Ok(v.h.add(&v.p)?.scale(0.5)))
            .collect::<Result<_>>()?;
        let subject_factors: Vec<Matrix> = self.state.views.iter().map(|v| v.f.clone()).collect();
        let final_objective = symmetric_objective(
            self.views,
            &node_factors,
            &subject_factors,
            &self.state.consensus,
            &self.config.lambdas,
        )?;
        Ok(M2eSolution {
            method: self.method,
            consensus: self.state.consensus,
            node_factors,
            subject_factors,
            iterations: self.objective_trace.len(),
            objective_trace: self.objective_trace,
            residual_trace: self.residual_trace,
            final_objective,
            data_norm_sq: self.data_norm_sq,
            converged: self.converged,
            final_mu: self.state.mu,
        })
    }
}

/// `Σᵥ ‖X⁽ᵛ⁾ − ⟦Hᵥ, Hᵥ, Fᵥ⟧‖² + Σᵥ λᵥ ‖Fᵥ − F*‖²`.
pub fn symmetric_objective(
    views: &[GraphViewTensor],
    node_factors: &[Matrix],
    subject_factors: &[Matrix],
    consensus: &Matrix,
    lambdas: &[f64],
) -> Result<f64> {
    if views.len() != node_factors.len() || views.len() != subject_factors.len() || views.len() != lambdas.len() {
        return Err(Error::Shape("view, factor and weight counts differ".into()));
    }
    let mut total = 0.0;
    for (((x, h), f), &l) in views.iter().zip(node_factors).zip(subject_factors).zip(lambdas) {
        total += residual_sq(x.tensor(), h, h, f)?;
        total += l * f.sub(consensus)?.frobenius_sq();
    }
    Ok(total)
}

pub fn m2e_fit(views: &[GraphViewTensor], config: &M2eConfig) -> Result<M2eSolution> {
    Solver::new(views, config.clone(), Method::Consensus)?.run()
}

pub fn m2e_ds_fit(views: &[GraphViewTensor], config: &M2eConfig) -> Result<M2eSolution> {
    Solver::new(views, config.clone(), Method::DirectShared)?.run()
}

/// Fits every view on its own (no consensus term in the F update), then
/// sets `F*` to the λ-weighted mean of the per-view subject factors.
///
/// Views advance in lock-step under one stopping rule on the summed
/// reconstruction error.
pub fn m2e_ts_fit(views: &[GraphViewTensor], config: &M2eConfig) -> Result<M2eSolution> {
    Solver::new(views, config.clone(), Method::TwoStep)?.run()
}

pub fn fit(views: &[GraphViewTensor], config: &M2eConfig, method: Method) -> Result<M2eSolution> {
    Solver::new(views, config.clone(), method)?.run()
}
