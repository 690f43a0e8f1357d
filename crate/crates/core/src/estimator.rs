//! Per-machine empirical risk minimization and plug-in inference.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::LossSpec;
use crate::model::{Dataset, Link};

/// A loss paired with a response link.
///
/// Supported pairs: any smooth residual loss with the linear link (squared,
/// ridge, pseudo-Huber), squared loss with the exponential link, and the
/// logistic log-likelihood with the logistic link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    loss: LossSpec,
    link: Link,
}

impl ModelSpec {
    pub fn new(loss: LossSpec, link: Link) -> Result<Self> {
        let ok = match (loss, link) {
            (LossSpec::Absolute, _) => false,
            (LossSpec::Logistic, l) => l == Link::Logistic,
            (_, Link::Logistic) => false,
            (LossSpec::Squared, Link::ExpNonlinear) => true,
            (_, Link::ExpNonlinear) => false,
            (_, Link::Linear) => true,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "unsupported loss/link pair: {} with {}",
                loss.name(),
                link.name()
            )));
        }
        Ok(Self { loss, link })
    }

    pub fn ols() -> Self {
        Self { loss: LossSpec::Squared, link: Link::Linear }
    }

    pub fn ridge(lambda: f64) -> Result<Self> {
        Ok(Self { loss: LossSpec::ridge(lambda)?, link: Link::Linear })
    }

    pub fn nonlinear_least_squares() -> Self {
        Self { loss: LossSpec::Squared, link: Link::ExpNonlinear }
    }

    pub fn logistic() -> Self {
        Self { loss: LossSpec::Logistic, link: Link::Logistic }
    }

    pub fn loss(&self) -> LossSpec {
        self.loss
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn penalty(&self) -> f64 {
        match self.loss {
            LossSpec::Ridge { lambda } => lambda,
            _ => 0.0,
        }
    }

    /// Penalty of a closed-form least-squares fit, if one exists.
    pub fn closed_form_penalty(&self) -> Option<f64> {
        match (self.loss, self.link) {
            (LossSpec::Squared, Link::Linear) => Some(0.0),
            (LossSpec::Ridge { lambda }, Link::Linear) => Some(lambda),
            _ => None,
        }
    }
}

/// Outcome of an iterative fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub theta_hat: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const MAX_NEWTON_ITER: usize = 200;
const ARMIJO_SHRINK: f64 = 0.5;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;
const PIVOT_RATIO: f64 = 1e-7;

/// `min(1e-10, n⁻²)`.
pub fn default_tolerance(n: usize) -> f64 {
    (1.0 / (n as f64).powi(2)).min(1e-10)
}

/// Per-observation first and second derivatives of the loss in the linear index.
struct Pointwise {
    value: f64,
    d1: f64,
    d2: f64,
    /// `d2` with the residual-curvature term dropped (Gauss-Newton).
    d2_gn: f64,
}

fn pointwise(model: &ModelSpec, s: f64, y: f64) -> Result<Pointwise> {
    Ok(match model.link {
        Link::Linear => {
            let r = y - s;
            let loss = model.loss;
            let d2 = loss.derivative(r, 2)?;
            Pointwise { value: loss.derivative(r, 0)?, d1: -loss.derivative(r, 1)?, d2, d2_gn: d2 }
        }
        Link::ExpNonlinear => {
            let g = s.exp();
            let r = y - g;
            Pointwise { value: 0.5 * r * r, d1: -r * g, d2: g * g - r * g, d2_gn: g * g }
        }
        Link::Logistic => {
            let l = LossSpec::Logistic;
            Pointwise {
                value: l.derivative(s, 0)? - y * s,
                d1: l.derivative(s, 1)? - y,
                d2: l.derivative(s, 2)?,
                d2_gn: l.derivative(s, 2)?,
            }
        }
    })
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    hess_gn: DMatrix<f64>,
}

fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        col.component_mul_assign(w);
    }
    x.tr_mul(&xw)
}

fn risk_value(d: &Dataset, model: &ModelSpec, theta: &DVector<f64>) -> Result<f64> {
    let s = &d.x * theta;
    let mut total = 0.0;
    for i in 0..d.n() {
        total += pointwise(model, s[i], d.y[i])?.value;
    }
    Ok(total / d.n() as f64 + 0.5 * model.penalty() * theta.norm_squared())
}

fn evaluate(d: &Dataset, model: &ModelSpec, theta: &DVector<f64>) -> Result<Eval> {
    let n = d.n() as f64;
    let p = d.p();
    let s = &d.x * theta;
    let mut value = 0.0;
    let mut d1 = DVector::zeros(d.n());
    let mut d2 = DVector::zeros(d.n());
    let mut d2_gn = DVector::zeros(d.n());
    for i in 0..d.n() {
        let pw = pointwise(model, s[i], d.y[i])?;
        value += pw.value;
        d1[i] = pw.d1;
        d2[i] = pw.d2;
        d2_gn[i] = pw.d2_gn;
    }
    let lambda = model.penalty();
    let ridge = DMatrix::<f64>::identity(p, p) * lambda;
    let hess = weighted_gram(&d.x, &d2) / n + &ridge;
    let hess_gn = if model.link == Link::ExpNonlinear {
        weighted_gram(&d.x, &d2_gn) / n + &ridge
    } else {
        hess.clone()
    };
    Ok(Eval {
        value: value / n + 0.5 * lambda * theta.norm_squared(),
        grad: d.x.tr_mul(&d1) / n + theta * lambda,
        hess,
        hess_gn,
    })
}

/// Cholesky factor of `h` if it is positive definite with acceptable pivots.
fn stable_cholesky(h: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let chol = Cholesky::new(linalg::symmetrize(h))?;
    let diag = chol.l_dirty().diagonal();
    let hi = diag.amax();
    let lo = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if hi > 0.0 && lo / hi > PIVOT_RATIO {
        Some(chol)
    } else {
        None
    }
}

/// Damped Newton with Armijo backtracking on the empirical risk.
///
/// Stops once the gradient norm is at most `tol` and the Newton step is
/// negligible. Hits the iteration cap with `converged = false` when no finite
/// minimizer exists (separable logistic data).
pub fn fit_erm(d: &Dataset, model: &ModelSpec, init: &DVector<f64>, tol: f64) -> Result<FitReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be > 0, got {tol}")));
    }
    if !model.loss.is_smooth() {
        return Err(Error::invalid("iterative fitting requires a smooth loss"));
    }
    if init.len() != d.p() {
        return Err(Error::invalid("initial value has the wrong dimension"));
    }
    let mut theta = init.clone();
    let mut eval = evaluate(d, model, &theta)?;
    for iter in 0..MAX_NEWTON_ITER {
        let chol = match stable_cholesky(&eval.hess) {
            Some(c) => c,
            None if model.link == Link::ExpNonlinear => {
                stable_cholesky(&eval.hess_gn).ok_or(Error::SingularHessian)?
            }
            None => return Err(Error::SingularHessian),
        };
        let step = chol.solve(&(-&eval.grad));
        let grad_norm = eval.grad.norm();
        if grad_norm <= tol && step.norm() <= 1e-6 * (1.0 + theta.norm()) {
            return Ok(FitReport { theta_hat: theta, grad_norm, iterations: iter, converged: true });
        }
        let slope = eval.grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let cand = &theta + &step * t;
            let v = risk_value(d, model, &cand)?;
            if v.is_finite() && v <= eval.value + ARMIJO_C * t * slope {
                accepted = Some(cand);
                break;
            }
            t *= ARMIJO_SHRINK;
        }
        match accepted {
            Some(cand) => {
                theta = cand;
                eval = evaluate(d, model, &theta)?;
            }
            None => {
                // No decrease is representable: the iterate is as good as it gets.
                let grad_norm = eval.grad.norm();
                return Ok(FitReport {
                    theta_hat: theta,
                    grad_norm,
                    iterations: iter + 1,
                    converged: grad_norm <= tol,
                });
            }
        }
    }
    let grad_norm = eval.grad.norm();
    Ok(FitReport { theta_hat: theta, grad_norm, iterations: MAX_NEWTON_ITER, converged: false })
}

/// Default starting point: zeros, or for the exponential link the OLS fit of
/// `ln y` on the rows with positive response when that system is solvable.
pub fn default_init(d: &Dataset, model: &ModelSpec) -> DVector<f64> {
    let p = d.p();
    if model.link == Link::ExpNonlinear {
        let rows: Vec<usize> = (0..d.n()).filter(|&i| d.y[i] > 0.0).collect();
        if rows.len() >= p {
            let sub = Dataset { x: d.x.select_rows(&rows), y: d.y.select_rows(&rows).map(f64::ln) };
            if let Ok(theta) = fit_closed(&sub, 0.0) {
                return theta;
            }
        }
    }
    DVector::zeros(p)
}

/// Fits one machine: closed form for least squares, Newton otherwise.
pub fn fit(d: &Dataset, model: &ModelSpec) -> Result<DVector<f64>> {
    if let Some(lambda) = model.closed_form_penalty() {
        return fit_closed(d, lambda);
    }
    let report = fit_erm(d, model, &default_init(d, model), default_tolerance(d.n()))?;
    if !report.converged {
        return Err(Error::Precondition(format!(
            "Newton iteration stopped after {} steps with gradient norm {:e}",
            report.iterations, report.grad_norm
        )));
    }
    Ok(report.theta_hat)
}

/// `(X'X/n + λI)⁻¹ X'y/n`.
pub fn fit_closed(d: &Dataset, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("penalty must be >= 0, got {lambda}")));
    }
    let n = d.n() as f64;
    let p = d.p();
    let gram = d.x.tr_mul(&d.x) / n + DMatrix::<f64>::identity(p, p) * lambda;
    let rhs = d.x.tr_mul(&d.y) / n;
    let chol = stable_cholesky(&gram).ok_or(Error::RankDeficient { rows: d.n(), cols: p })?;
    Ok(chol.solve(&rhs))
}

/// `(Σ + λI)⁻¹ Σ θ₀`.
pub fn ridge_population_target(
    theta0: &DVector<f64>,
    sigma: &DMatrix<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let p = theta0.len();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::invalid("covariance must be p x p"));
    }
    let a = sigma + DMatrix::<f64>::identity(p, p) * lambda;
    linalg::spd_solve(&a, &(sigma * theta0)).ok_or(Error::SingularHessian)
}

/// Plug-in `V⁻¹ (1/n Σ ∇fᵢ∇fᵢ') V⁻¹` with `V` the empirical Hessian; exactly symmetric.
pub fn sandwich_covariance(
    d: &Dataset,
    theta_hat: &DVector<f64>,
    model: &ModelSpec,
) -> Result<DMatrix<f64>> {
    let n = d.n() as f64;
    let eval = evaluate(d, model, theta_hat)?;
    let v_inv = stable_cholesky(&eval.hess).ok_or(Error::SingularHessian)?.inverse();
    let s = &d.x * theta_hat;
    let lambda = model.penalty();
    let mut scores = DMatrix::zeros(d.n(), d.p());
    for i in 0..d.n() {
        let d1 = pointwise(model, s[i], d.y[i])?.d1;
        for j in 0..d.p() {
            scores[(i, j)] = d1 * d.x[(i, j)] + lambda * theta_hat[j];
        }
    }
    let meat = scores.tr_mul(&scores) / n;
    let cov = &v_inv * meat * &v_inv;
    Ok(linalg::symmetrize(&cov))
}

/// Two-sided Wald intervals `θ̂ⱼ ± z √(Covⱼⱼ / n)` at the given level.
pub fn wald_intervals(
    theta_hat: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok((0..theta_hat.len())
        .map(|j| {
            let half = z * (cov[(j, j)] / n as f64).sqrt();
            (theta_hat[j] - half, theta_hat[j] + half)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ramp_coefficients, sample_dataset, GenerativeConfig, NoiseDist, SigmaSpec};

    fn ols_data(n: usize, p: usize, var: f64, seed: u64) -> Dataset {
        let cfg = GenerativeConfig::linear_identity(ramp_coefficients(p, 1.0), NoiseDist::gaussian(var).unwrap())
            .unwrap();
        sample_dataset(&cfg, n, seed).unwrap()
    }

    #[test]
    fn closed_form_worked_values() {
        let d = Dataset::new(DMatrix::from_element(2, 1, 1.0), DVector::from_vec(vec![1.0, 3.0])).unwrap();
        assert!((fit_closed(&d, 0.0).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((fit_closed(&d, 1.0).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!(fit_closed(&d, 1e12).unwrap()[0].abs() < 1e-11);
        let wide = ols_data(2, 4, 1.0, 1);
        assert!(matches!(fit_closed(&wide, 0.0), Err(Error::RankDeficient { .. })));
        assert!(fit_closed(&wide, 0.5).is_ok());
    }

    #[test]
    fn newton_matches_normal_equations() {
        let d = ols_data(200, 6, 1.0, 3);
        let beta = fit_closed(&d, 0.0).unwrap();
        let r = fit_erm(&d, &ModelSpec::ols(), &DVector::from_element(6, 5.0), 1e-10).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert!((r.theta_hat - &beta).norm() < 1e-8);

        let ridge = ModelSpec::ridge(0.7).unwrap();
        let rr = fit_erm(&d, &ridge, &DVector::zeros(6), 1e-10).unwrap();
        assert!((rr.theta_hat - fit_closed(&d, 0.7).unwrap()).norm() < 1e-8);
    }

    #[test]
    fn separable_logistic_does_not_converge() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let d = Dataset::new(x, y).unwrap();
        let r = fit_erm(&d, &ModelSpec::logistic(), &DVector::zeros(1), 1e-10).unwrap();
        assert!(!r.converged);
        assert!(r.theta_hat[0] > 10.0);
    }

    #[test]
    fn logistic_and_nls_recover_truth() {
        let theta0 = ramp_coefficients(3, 1.0);
        let cfg = GenerativeConfig::new(
            SigmaSpec::Identity,
            theta0.clone(),
            NoiseDist::gaussian(1.0).unwrap(),
            Link::Logistic,
        )
        .unwrap();
        let d = sample_dataset(&cfg, 20_000, 5).unwrap();
        let th = fit(&d, &ModelSpec::logistic()).unwrap();
        assert!((th - &theta0).norm() < 0.1);

        let cfg = cfg.with_link(Link::ExpNonlinear);
        let d = sample_dataset(&cfg, 20_000, 6).unwrap();
        let th = fit(&d, &ModelSpec::nonlinear_least_squares()).unwrap();
        assert!((th - &theta0).norm() < 0.05);
    }

    #[test]
    fn objective_decreases_monotonically() {
        let theta0 = ramp_coefficients(3, 1.0);
        let cfg = GenerativeConfig::new(
            SigmaSpec::Identity,
            theta0,
            NoiseDist::gaussian(1.0).unwrap(),
            Link::Logistic,
        )
        .unwrap();
        let d = sample_dataset(&cfg, 500, 8).unwrap();
        let model = ModelSpec::logistic();
        let init = DVector::from_element(3, 4.0);
        let mut last = risk_value(&d, &model, &init).unwrap();
        let mut theta = init.clone();
        for k in 1..6 {
            theta = fit_erm_capped(&d, &model, &init, k);
            let v = risk_value(&d, &model, &theta).unwrap();
            assert!(v <= last + 1e-15);
            last = v;
        }
        assert!(theta.iter().all(|v| v.is_finite()));
    }

    fn fit_erm_capped(d: &Dataset, model: &ModelSpec, init: &DVector<f64>, steps: usize) -> DVector<f64> {
        let mut theta = init.clone();
        for _ in 0..steps {
            let e = evaluate(d, model, &theta).unwrap();
            let step = stable_cholesky(&e.hess).unwrap().solve(&(-&e.grad));
            let slope = e.grad.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &theta + &step * t;
                if risk_value(d, model, &cand).unwrap() <= e.value + ARMIJO_C * t * slope {
                    theta = cand;
                    break;
                }
                t *= ARMIJO_SHRINK;
            }
        }
        theta
    }

    #[test]
    fn unsupported_pairs_rejected() {
        assert!(ModelSpec::new(LossSpec::Absolute, Link::Linear).is_err());
        assert!(ModelSpec::new(LossSpec::Logistic, Link::Linear).is_err());
        assert!(ModelSpec::new(LossSpec::Squared, Link::Logistic).is_err());
        assert!(ModelSpec::new(LossSpec::PseudoHuber { delta: 3.0 }, Link::ExpNonlinear).is_err());
        assert!(ModelSpec::new(LossSpec::PseudoHuber { delta: 3.0 }, Link::Linear).is_ok());
    }

    #[test]
    fn population_target() {
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let id = DMatrix::identity(2, 2);
        assert_eq!(ridge_population_target(&e1, &id, 0.0).unwrap(), e1);
        assert!((ridge_population_target(&e1, &id, 1.0).unwrap() - &e1 * 0.5).norm() < 1e-15);
        assert_eq!(ridge_population_target(&DVector::zeros(2), &id, 1.0).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn sandwich_properties() {
        let d = ols_data(300, 3, 0.0, 2);
        let th = fit_closed(&d, 0.0).unwrap();
        let cov = sandwich_covariance(&d, &th, &ModelSpec::ols()).unwrap();
        assert!(cov.amax() < 1e-20);

        let d = ols_data(100_000, 3, 1.0, 4);
        let th = fit_closed(&d, 0.0).unwrap();
        let cov = sandwich_covariance(&d, &th, &ModelSpec::ols()).unwrap();
        assert_eq!(cov, cov.transpose());
        assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() < 0.05);
    }

    #[test]
    fn wald_interval_width() {
        let th = DVector::from_vec(vec![0.0]);
        let cov = DMatrix::from_element(1, 1, 4.0);
        let ci = wald_intervals(&th, &cov, 100, 0.95).unwrap();
        assert!((ci[0].1 - 1.959963984540054 * 0.2).abs() < 1e-9);
    }
}
