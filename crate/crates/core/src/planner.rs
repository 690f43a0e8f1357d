//! Choosing the number of machines from predicted error.
//!
//! Two budgets: a per-machine memory limit (`n` fixed, more machines means more
//! data and less error) and a total sample budget (`N` fixed, more machines
//! means smaller shards and more error). The bound is either absolute (total
//! MSE) or relative to the single-machine error.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fixed_p::{m2_parallel, GammaSet};
use crate::high_dim::{solve_rc, QuadratureSpec, DEFAULT_SOLVER_TOL};
use crate::linalg;
use crate::losses::LossSpec;
use crate::model::NoiseDist;

/// Relative slack when comparing a predicted error with the bound, so that a
/// boundary landing on an integer up to rounding counts as feasible.
pub const FEASIBILITY_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    /// Per-machine sample size `n` is fixed.
    FixedPerMachine(usize),
    /// Total sample size `N` is fixed; `n = N/m`.
    FixedTotal(usize),
}

impl PlanMode {
    pub fn name(&self) -> &'static str {
        match self {
            PlanMode::FixedPerMachine(_) => "fixed-n",
            PlanMode::FixedTotal(_) => "fixed-N",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    /// Bound on the total MSE `Tr E[(θ̄-θ*)(θ̄-θ*)']`.
    Absolute(f64),
    /// Allowed fractional excess over the single-machine error.
    Relative(f64),
}

impl Constraint {
    pub fn name(&self) -> &'static str {
        match self {
            Constraint::Absolute(_) => "absolute",
            Constraint::Relative(_) => "relative",
        }
    }

    fn eps(&self) -> f64 {
        match *self {
            Constraint::Absolute(e) | Constraint::Relative(e) => e,
        }
    }
}

/// High-dimensional regime with isotropic contrasts: the error of `m`
/// machines is `r²(κ) Tr(Σ⁻¹) / (m p)`.
#[derive(Debug, Clone)]
pub struct HighDimRegime {
    pub loss: LossSpec,
    pub noise: NoiseDist,
    pub p: usize,
    sigma_inv_trace: f64,
    pub quadrature: QuadratureSpec,
}

impl HighDimRegime {
    pub fn new(loss: LossSpec, noise: NoiseDist, sigma: &DMatrix<f64>) -> Result<Self> {
        let p = sigma.nrows();
        if p == 0 || !sigma.is_square() {
            return Err(Error::invalid("Sigma must be a non-empty square matrix"));
        }
        let inv = linalg::spd_inverse(sigma).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { loss, noise, p, sigma_inv_trace: inv.trace(), quadrature: QuadratureSpec::default() })
    }

    /// Identity design of dimension `p`.
    pub fn isotropic(loss: LossSpec, noise: NoiseDist, p: usize) -> Result<Self> {
        Self::new(loss, noise, &DMatrix::identity(p, p))
    }
}

#[derive(Debug, Clone)]
pub enum Regime {
    FixedP(GammaSet),
    HighDim(HighDimRegime),
}

#[derive(Debug, Clone)]
pub struct PlannerProblem {
    pub mode: PlanMode,
    pub constraint: Constraint,
    pub regime: Regime,
}

impl PlannerProblem {
    pub fn new(mode: PlanMode, constraint: Constraint, regime: Regime) -> Result<Self> {
        let eps = constraint.eps();
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("the error bound must be positive"));
        }
        match mode {
            PlanMode::FixedPerMachine(0) | PlanMode::FixedTotal(0) => {
                return Err(Error::invalid("sample sizes must be >= 1"));
            }
            _ => {}
        }
        Ok(Self { mode, constraint, regime })
    }

    /// Per-machine sample size at (possibly fractional) `m`.
    fn n_at(&self, m: f64) -> f64 {
        match self.mode {
            PlanMode::FixedPerMachine(n) => n as f64,
            PlanMode::FixedTotal(total) => total as f64 / m,
        }
    }

    fn error_real(&self, m: f64) -> Result<f64> {
        if !(m >= 1.0) {
            return Err(Error::invalid("the machine count must be >= 1"));
        }
        let n = self.n_at(m);
        match &self.regime {
            Regime::FixedP(g) => Ok(m2_parallel(g, n, m)?.trace()),
            Regime::HighDim(h) => {
                let kappa = h.p as f64 / n;
                if !(kappa > 0.0 && kappa < 1.0) {
                    return Err(Error::InfeasibleRegime(kappa));
                }
                let r2 = solve_rc(h.loss, h.noise, kappa, &h.quadrature, DEFAULT_SOLVER_TOL)?.r2();
                Ok(r2 * h.sigma_inv_trace / (m * h.p as f64))
            }
        }
    }

    /// Error bound in absolute terms.
    fn bound(&self) -> Result<f64> {
        Ok(match self.constraint {
            Constraint::Absolute(e) => e,
            Constraint::Relative(e) => (1.0 + e) * self.error_real(1.0)?,
        })
    }

    /// Largest admissible machine count for the regime, if any.
    fn m_limit(&self) -> Option<f64> {
        match (self.mode, &self.regime) {
            (PlanMode::FixedTotal(total), Regime::FixedP(_)) => Some(total as f64),
            // κ = p m / N < 1.
            (PlanMode::FixedTotal(total), Regime::HighDim(h)) => Some(((total - 1) / h.p) as f64),
            (PlanMode::FixedPerMachine(_), _) => None,
        }
    }
}

/// Predicted total MSE of the averaged estimator on `m` machines.
pub fn predicted_error(prob: &PlannerProblem, m: usize) -> Result<f64> {
    prob.error_real(m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub m: usize,
    pub achieved_error: f64,
    /// True when the neighbouring count in the search direction violates the bound.
    pub binding: bool,
    /// Real-valued machine count at which the error equals the bound, when bracketed.
    pub real_boundary: Option<f64>,
    pub error_at_one: f64,
    pub bound: f64,
}

/// Smallest (`n` fixed) or largest (`N` fixed) machine count meeting the bound.
///
/// Relies on the error being monotone in `m`: decreasing for fixed `n`,
/// increasing for fixed `N`.
pub fn choose_m(prob: &PlannerProblem) -> Result<PlanResult> {
    let bound = prob.bound()?;
    let error_at_one = prob.error_real(1.0)?;
    let feasible = |e: f64| e <= bound * (1.0 + FEASIBILITY_RTOL);
    let ok = |m: usize| -> Result<bool> { Ok(feasible(prob.error_real(m as f64)?)) };
    // Bisection for the real crossing inside [lo, hi], if the sign changes there.
    let real_root = |lo: f64, hi: f64| -> Result<Option<f64>> {
        let (mut lo, mut hi) = (lo.max(1.0), hi);
        let f_lo = prob.error_real(lo)? - bound;
        if f_lo.signum() == (prob.error_real(hi)? - bound).signum() {
            return Ok(None);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (prob.error_real(mid)? - bound).signum() == f_lo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-9 * hi {
                break;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    };

    match prob.mode {
        PlanMode::FixedPerMachine(_) => {
            if feasible(error_at_one) {
                return Ok(PlanResult {
                    m: 1,
                    achieved_error: error_at_one,
                    binding: false,
                    real_boundary: None,
                    error_at_one,
                    bound,
                });
            }
            // Grow until feasible, then bisect on (infeasible, feasible].
            let mut hi: usize = 2;
            while !ok(hi)? {
                if hi > 1 << 50 {
                    return Err(Error::Infeasible { bound, error_at_one });
                }
                hi *= 2;
            }
            let mut lo = hi / 2;
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if ok(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(PlanResult {
                m: hi,
                achieved_error: prob.error_real(hi as f64)?,
                binding: true,
                real_boundary: real_root(lo as f64, hi as f64 + 1.0)?,
                error_at_one,
                bound,
            })
        }
        PlanMode::FixedTotal(_) => {
            if !feasible(error_at_one) {
                return Err(Error::Infeasible { bound, error_at_one });
            }
            let limit = prob.m_limit().unwrap_or(1.0).max(1.0) as usize;
            if ok(limit)? {
                return Ok(PlanResult {
                    m: limit,
                    achieved_error: prob.error_real(limit as f64)?,
                    binding: false,
                    real_boundary: None,
                    error_at_one,
                    bound,
                });
            }
            // Invariant: lo feasible, hi infeasible.
            let (mut lo, mut hi) = (1usize, limit);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if ok(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(PlanResult {
                m: lo,
                achieved_error: prob.error_real(lo as f64)?,
                binding: true,
                real_boundary: real_root(lo as f64 - 1.0, hi as f64)?,
                error_at_one,
                bound,
            })
        }
    }
}
