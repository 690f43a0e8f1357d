//! Proportional-asymptotics residual equations for M-estimators with `p/n → κ`.
//!
//! With compound noise `ξ = ε + rη`, `η ~ N(0, 1)` independent of `ε`, the pair
//! `(c, r)` solves
//!
//! ```text
//! E[∂z prox_c(ξ)]        = 1 - κ
//! E[(ξ - prox_c(ξ))²]    = κ r²
//! ```
//!
//! For small `κ`, `c = c₁κ + c₂κ² + …` and `r² = r₁κ + r₂κ² + …`, with
//! coefficients given by moments of loss derivatives at the noise. The MSE of
//! averaging `m` machines relative to one machine with all the data is
//! `r²(κ)/m ÷ r²(κ/m) ≈ 1 + κ (r₂/r₁)(1 - 1/m)`.

use std::cell::RefCell;
use std::f64::consts::PI;


use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::std_normal_cdf;
use crate::losses::LossSpec;
use crate::model::NoiseDist;
use crate::quadrature::{integrate, AdaptiveOptions, GaussHermite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadScheme {
    GaussHermite,
    Adaptive,
}

/// How expectations over the compound noise are computed.
///
/// Gaussian noise collapses `ε + rη` to one normal with variance `σ² + r²`.
/// Laplace noise is integrated adaptively in `ε` (panels split at the density
/// kink), with the inner normal expectation done by Gauss-Hermite. Integrands
/// with kinks always use adaptive panels split at the kinks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    nodes: usize,
    scheme: QuadScheme,
    /// Half-width of the Laplace integration range, in scale units.
    laplace_truncation: f64,
    /// Half-width of the Gaussian integration range, in standard deviations.
    gaussian_truncation: f64,
    rule: GaussHermite,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self::new(64, QuadScheme::GaussHermite).expect("default nodes are valid")
    }
}

impl QuadratureSpec {
    pub fn new(nodes: usize, scheme: QuadScheme) -> Result<Self> {
        if nodes < 16 {
            return Err(Error::invalid(format!("quadrature needs >= 16 nodes, got {nodes}")));
        }
        Ok(Self {
            nodes,
            scheme,
            laplace_truncation: 40.0,
            gaussian_truncation: 14.0,
            rule: GaussHermite::new(nodes),
        })
    }

    pub fn with_laplace_truncation(mut self, scales: f64) -> Self {
        self.laplace_truncation = scales;
        self
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn scheme(&self) -> QuadScheme {
        self.scheme
    }
}

fn opts() -> AdaptiveOptions {
    AdaptiveOptions { abs_tol: 1e-16, rel_tol: 1e-12, max_panels: 4000 }
}

fn normal_pdf(x: f64, s: f64) -> f64 {
    (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
}

fn laplace_pdf(x: f64, b: f64) -> f64 {
    (-x.abs() / b).exp() / (2.0 * b)
}

/// `E[g(ε)]` over the noise alone.
fn expect_noise<const K: usize>(
    noise: NoiseDist,
    q: &QuadratureSpec,
    g: impl Fn(f64) -> [f64; K],
    kinks: &[f64],
) -> Result<[f64; K]> {
    match noise {
        NoiseDist::Gaussian { variance } => expect_normal(variance.sqrt(), q, &g, kinks),
        NoiseDist::Laplace { scale: b } if b == 0.0 => Ok(g(0.0)),
        NoiseDist::Laplace { scale: b } => {
            let lim = q.laplace_truncation * b;
            let mut bp = vec![0.0];
            bp.extend_from_slice(kinks);
            integrate(
                |e| {
                    let w = laplace_pdf(e, b);
                    g(e).map(|v| v * w)
                },
                -lim,
                lim,
                &bp,
                opts(),
            )
        }
    }
}

/// `E[g(s Z)]` for standard normal `Z`.
fn expect_normal<const K: usize>(
    s: f64,
    q: &QuadratureSpec,
    g: &impl Fn(f64) -> [f64; K],
    kinks: &[f64],
) -> Result<[f64; K]> {
    if s == 0.0 {
        return Ok(g(0.0));
    }
    if q.scheme == QuadScheme::GaussHermite && kinks.is_empty() {
        let v = q.rule.expect(0.0, s, g);
        if v.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteIntegrand { at: f64::NAN });
        }
        return Ok(v);
    }
    let lim = q.gaussian_truncation * s;
    let mut bp = vec![0.0];
    bp.extend_from_slice(kinks);
    integrate(
        |x| {
            let w = normal_pdf(x, s);
            g(x).map(|v| v * w)
        },
        -lim,
        lim,
        &bp,
        opts(),
    )
}

/// `E[g(ε + rη)]` for a vector-valued `g` with optional kink locations.
pub fn expect_xi_vec<const K: usize>(
    g: impl Fn(f64) -> [f64; K],
    noise: NoiseDist,
    r: f64,
    q: &QuadratureSpec,
    kinks: &[f64],
) -> Result<[f64; K]> {
    if !(r >= 0.0) {
        return Err(Error::invalid(format!("r must be >= 0, got {r}")));
    }
    match noise {
        NoiseDist::Gaussian { variance } => {
            expect_normal((variance + r * r).sqrt(), q, &g, kinks)
        }
        NoiseDist::Laplace { .. } if r == 0.0 => expect_noise(noise, q, g, kinks),
        NoiseDist::Laplace { scale: b } if b == 0.0 => expect_normal(r, q, &g, kinks),
        NoiseDist::Laplace { .. } => {
            let failure = RefCell::new(None);
            let inner = |e: f64| -> [f64; K] {
                let shifted: Vec<f64> = kinks.iter().map(|k| k - e).collect();
                match expect_normal(r, q, &|t| g(e + t), &shifted) {
                    Ok(v) => v,
                    Err(err) => {
                        failure.borrow_mut().get_or_insert(err);
                        [f64::NAN; K]
                    }
                }
            };
            let out = expect_noise(noise, q, inner, kinks);
            match failure.into_inner() {
                Some(err) => Err(err),
                None => out,
            }
        }
    }
}

/// `E[g(ε + rη)]` for a smooth scalar `g`.
pub fn expect_xi(g: impl Fn(f64) -> f64, noise: NoiseDist, r: f64, q: &QuadratureSpec) -> Result<f64> {
    Ok(expect_xi_vec(|x| [g(x)], noise, r, q, &[])?[0])
}

/// A solution of the residual equations at one `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RcSolution {
    pub kappa: f64,
    pub c: f64,
    pub r: f64,
    pub residuals: [f64; 2],
    pub iterations: usize,
}

impl RcSolution {
    pub fn r2(&self) -> f64 {
        self.r * self.r
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Conditional moments of soft-thresholding at `c` for `x ~ N(μ, s²)`:
/// `(P(|x| > c), E[min(x², c²)])`.
fn soft_threshold_normal(mu: f64, s: f64, c: f64) -> [f64; 2] {
    if s == 0.0 {
        return [if mu.abs() > c { 1.0 } else { 0.0 }, mu.powi(2).min(c * c)];
    }
    let alpha = (-c - mu) / s;
    let beta = (c - mu) / s;
    let tail = std_normal_cdf(alpha) + std_normal_cdf(-beta);
    let inside = if beta <= 0.0 {
        std_normal_cdf(beta) - std_normal_cdf(alpha)
    } else if alpha >= 0.0 {
        std_normal_cdf(-alpha) - std_normal_cdf(-beta)
    } else {
        1.0 - tail
    };
    let (pa, pb) = (std_normal_pdf(alpha), std_normal_pdf(beta));
    let second = (mu * mu + s * s) * inside + 2.0 * mu * s * (pa - pb) + s * s * (alpha * pa - beta * pb);
    [tail, c * c * tail + second]
}

/// `(E[∂z prox_c(ξ)], E[(ξ - prox_c(ξ))²])` at `(c, r)`.
fn prox_moments(loss: LossSpec, noise: NoiseDist, c: f64, r: f64, q: &QuadratureSpec) -> Result<[f64; 2]> {
    match loss {
        LossSpec::Absolute => match noise {
            NoiseDist::Gaussian { variance } => Ok(soft_threshold_normal(0.0, (variance + r * r).sqrt(), c)),
            NoiseDist::Laplace { scale: b } if b == 0.0 => Ok(soft_threshold_normal(0.0, r, c)),
            NoiseDist::Laplace { .. } => {
                expect_noise(noise, q, |e| soft_threshold_normal(e, r, c), &[-c, c])
            }
        },
        _ => {
            let failure = RefCell::new(None);
            let g = |x: f64| match loss.prox(c, x) {
                Ok((p, d)) => [d, (x - p).powi(2)],
                Err(err) => {
                    failure.borrow_mut().get_or_insert(err);
                    [f64::NAN; 2]
                }
            };
            let out = expect_xi_vec(g, noise, r, q, &[]);
            match failure.into_inner() {
                Some(err) => Err(err),
                None => out,
            }
        }
    }
}

fn residual(loss: LossSpec, noise: NoiseDist, kappa: f64, c: f64, v: f64, q: &QuadratureSpec) -> Result<[f64; 2]> {
    let [d, s] = prox_moments(loss, noise, c, v.max(0.0).sqrt(), q)?;
    Ok([d - (1.0 - kappa), s - kappa * v])
}

const MAX_SOLVER_ITER: usize = 100;
pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

/// Leading-order starting point `(c₁κ, r₁κ)` for the Newton solve.
fn initial_guess(loss: LossSpec, noise: NoiseDist, kappa: f64, q: &QuadratureSpec) -> Result<(f64, f64)> {
    let (c1, r1) = match loss {
        LossSpec::Absolute => {
            let f0 = noise_density_at_zero(noise);
            if !(f0.is_finite() && f0 > 0.0) {
                return Err(Error::DegenerateLoss(f0));
            }
            (1.0 / (2.0 * f0), 1.0 / (4.0 * f0 * f0))
        }
        _ => {
            let pc = perturb_coeffs(loss, noise, q)?;
            (pc.c1, pc.r1)
        }
    };
    Ok((c1 * kappa, r1 * kappa))
}

/// Density of the noise at zero.
pub fn noise_density_at_zero(noise: NoiseDist) -> f64 {
    match noise {
        NoiseDist::Gaussian { variance } => 1.0 / (2.0 * PI * variance).sqrt(),
        NoiseDist::Laplace { scale } => 1.0 / (2.0 * scale),
    }
}

/// Damped Newton in `(c, r²)` with a forward-difference Jacobian.
pub fn solve_rc(
    loss: LossSpec,
    noise: NoiseDist,
    kappa: f64,
    q: &QuadratureSpec,
    tol: f64,
) -> Result<RcSolution> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InfeasibleRegime(kappa));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("solver tolerance must be > 0, got {tol}")));
    }
    let (mut c, mut v) = initial_guess(loss, noise, kappa, q)?;
    c = c.max(f64::MIN_POSITIVE.sqrt());
    let norm = |f: [f64; 2]| f[0].hypot(f[1]);
    let mut f = residual(loss, noise, kappa, c, v, q)?;
    let mut trace = vec![norm(f)];
    let mut stalls = 0;
    for iter in 0..MAX_SOLVER_ITER {
        let hc = 1e-7 * c;
        let hv = 1e-7 * v.max(1e-3 * c).max(1e-300);
        let fc = residual(loss, noise, kappa, c + hc, v, q)?;
        let fv = residual(loss, noise, kappa, c, v + hv, q)?;
        let j = [
            [(fc[0] - f[0]) / hc, (fv[0] - f[0]) / hv],
            [(fc[1] - f[1]) / hc, (fv[1] - f[1]) / hv],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det.is_finite() && det != 0.0) {
            break;
        }
        let dc = -(j[1][1] * f[0] - j[0][1] * f[1]) / det;
        let dv = -(-j[1][0] * f[0] + j[0][0] * f[1]) / det;

        let current = norm(f);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let (nc, nv) = (c + t * dc, v + t * dv);
            if nc > 0.0 && nv >= 0.0 {
                let nf = residual(loss, noise, kappa, nc, nv, q)?;
                if norm(nf) < current || (norm(nf) <= tol && current <= tol) {
                    accepted = Some((nc, nv, nf));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((nc, nv, nf)) = accepted else {
            if current <= tol {
                return Ok(RcSolution { kappa, c, r: v.sqrt(), residuals: f, iterations: iter });
            }
            break;
        };
        let rel_step = ((nc - c) / c).abs().max(if v > 0.0 { ((nv - v) / v).abs() } else { 0.0 });
        c = nc;
        v = nv;
        f = nf;
        trace.push(norm(f));
        if norm(f) <= tol {
            if rel_step <= 1e-12 || norm(f) == 0.0 {
                return Ok(RcSolution { kappa, c, r: v.sqrt(), residuals: f, iterations: iter + 1 });
            }
            stalls += 1;
            if stalls >= 8 {
                return Ok(RcSolution { kappa, c, r: v.sqrt(), residuals: f, iterations: iter + 1 });
            }
        }
    }
    let last = *trace.last().expect("trace is non-empty");
    Err(Error::SolverFailure { kappa, iterations: trace.len() - 1, residual_trace: trace, last })
}

/// Small-`κ` series coefficients and the loss/noise moments behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbCoeffs {
    pub a2: f64,
    pub a4: f64,
    pub t1: f64,
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
    pub r1: f64,
    pub r2: f64,
}

impl PerturbCoeffs {
    pub fn from_moments(a2: f64, a4: f64, t1: f64, b1: f64, b2: f64) -> Result<Self> {
        if !(a2 > 0.0) {
            return Err(Error::DegenerateLoss(a2));
        }
        Ok(Self {
            a2,
            a4,
            t1,
            b1,
            b2,
            c1: 1.0 / a2,
            c2: t1 / a2.powi(3) - b1 * a4 / a2.powi(4),
            r1: b1 / a2.powi(2),
            r2: 3.0 * b1 * t1 / a2.powi(4) - 2.0 * b1 * b1 * a4 / a2.powi(5) - 2.0 * b2 / a2.powi(3),
        })
    }

    pub fn ratio(&self) -> f64 {
        self.r2 / self.r1
    }

    /// `r₂` with `+2B₂/A₂³` in place of `-2B₂/A₂³`; disagrees with the exact
    /// squared-loss solution and is kept only for comparison.
    pub fn r2_plus_sign_variant(&self) -> f64 {
        self.r2 + 4.0 * self.b2 / self.a2.powi(3)
    }
}

/// Moments `A₂ = E f″`, `A₄ = E f⁗/2`, `T₁ = E[f″² + f′f‴]`, `B₁ = E f′²`,
/// `B₂ = E[f′² f″]` at the noise, and the resulting series coefficients.
pub fn perturb_coeffs(loss: LossSpec, noise: NoiseDist, q: &QuadratureSpec) -> Result<PerturbCoeffs> {
    if !loss.is_smooth() {
        return Err(Error::invalid(format!(
            "series coefficients need a loss with four derivatives; {} has none (use the series fit)",
            loss.name()
        )));
    }
    let failure = RefCell::new(None);
    let g = |t: f64| match loss.derivatives_1to4(t) {
        Ok([f1, f2, f3, f4]) => [f2, 0.5 * f4, f2 * f2 + f1 * f3, f1 * f1, f1 * f1 * f2],
        Err(err) => {
            failure.borrow_mut().get_or_insert(err);
            [f64::NAN; 5]
        }
    };
    let m = expect_noise(noise, q, g, &[]);
    if let Some(err) = failure.into_inner() {
        return Err(err);
    }
    let [a2, a4, t1, b1, b2] = m?;
    PerturbCoeffs::from_moments(a2, a4, t1, b1, b2)
}

/// Polynomial model for fitting `r²(κ)` on a grid of small `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeriesModel {
    /// `r₁κ + r₂κ²`.
    Quadratic,
    /// `r₁κ + r₂κ² + r₃κ³`; the cubic term absorbs curvature that would
    /// otherwise leak into `r₂`.
    #[default]
    Cubic,
}

/// Least-squares fit of `r²(κ)` from exact solves; returns `(r₁, r₂)`.
pub fn series_fit(
    loss: LossSpec,
    noise: NoiseDist,
    kappa_grid: &[f64],
    q: &QuadratureSpec,
    model: SeriesModel,
) -> Result<(f64, f64)> {
    if kappa_grid.len() < 4 {
        return Err(Error::invalid("the series fit needs at least 4 kappa values"));
    }
    if kappa_grid.iter().any(|&k| !(k > 0.0 && k <= 0.1)) {
        return Err(Error::invalid("kappa values for the series fit must lie in (0, 0.1]"));
    }
    let terms = match model {
        SeriesModel::Quadratic => 2,
        SeriesModel::Cubic => 3,
    };
    let scale = kappa_grid.iter().fold(0.0_f64, |m, &k| m.max(k));
    let design = DMatrix::from_fn(kappa_grid.len(), terms, |i, j| (kappa_grid[i] / scale).powi(j as i32 + 1));
    let y = kappa_grid
        .iter()
        .map(|&k| solve_rc(loss, noise, k, q, DEFAULT_SOLVER_TOL).map(|s| s.r2()))
        .collect::<Result<Vec<f64>>>()?;
    let (qm, rm) = design.qr().unpack();
    let rhs = qm.tr_mul(&DVector::from_vec(y));
    let coef = rm
        .solve_upper_triangular(&rhs)
        .filter(|_| crate::linalg::sym_rcond(&(rm.transpose() * &rm)) > 1e-24)
        .ok_or_else(|| Error::invalid("kappa grid does not identify the series coefficients"))?;
    Ok((coef[0] / scale, coef[1] / (scale * scale)))
}

/// Default grid for [`absolute_series`]: `κ = 0.0005, 0.001, …, 0.01`.
pub fn default_series_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 5e-4).collect()
}

/// Series coefficients `(r₁, r₂)` of the absolute loss, fitted from exact solves.
pub fn absolute_series(noise: NoiseDist, kappa_grid: &[f64], q: &QuadratureSpec) -> Result<(f64, f64)> {
    series_fit(LossSpec::Absolute, noise, kappa_grid, q, SeriesModel::default())
}

/// `1 + κ (r₂/r₁)(1 - 1/m)`.
pub fn mse_ratio_first_order(kappa: f64, m: f64, coeffs: &PerturbCoeffs) -> Result<f64> {
    mse_ratio_first_order_from_ratio(kappa, m, coeffs.ratio())
}

pub fn mse_ratio_first_order_from_ratio(kappa: f64, m: f64, r2_over_r1: f64) -> Result<f64> {
    if !(m >= 1.0) {
        return Err(Error::invalid(format!("m must be >= 1, got {m}")));
    }
    Ok(1.0 + kappa * r2_over_r1 * (1.0 - 1.0 / m))
}

/// `(r²(κ)/m) / r²(κ/m)` from two exact solves.
pub fn mse_ratio_exact(loss: LossSpec, noise: NoiseDist, kappa: f64, m: f64, q: &QuadratureSpec) -> Result<f64> {
    if !(m >= 1.0) {
        return Err(Error::invalid(format!("m must be >= 1, got {m}")));
    }
    if m == 1.0 {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::InfeasibleRegime(kappa));
        }
        return Ok(1.0);
    }
    let split = solve_rc(loss, noise, kappa, q, DEFAULT_SOLVER_TOL)?;
    let central = solve_rc(loss, noise, kappa / m, q, DEFAULT_SOLVER_TOL)?;
    Ok(split.r2() / m / central.r2())
}
