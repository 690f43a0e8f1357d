//! Brute-force Monte Carlo checks: Wishart moment identities and empirical
//! fits of the bias and MSE expansion coefficients.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::ModelSpec;
use crate::linalg;
use crate::model::GenerativeConfig;
use crate::parallel::{run_experiment, ExperimentConfig};
use crate::rng::{derive_seed, seeded};

/// Matrix expressions in independent rank-one Wishart draws `S1`, `S2` and a
/// fixed symmetric `B`. Names spell out the product: `E_SS2BS` is `E[S1 S2 B S1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[allow(non_camel_case_types)]
pub enum WishartId {
    E_S,
    E_SBS,
    E_SBS2BS,
    E_SS2BSS2,
    E_SS2BS,
    E_SS2BS2S,
    E_S2BS,
    E_SS2S_BS2,
    E_SS22BS,
}

impl WishartId {
    pub const ALL: [WishartId; 9] = [
        WishartId::E_S,
        WishartId::E_SBS,
        WishartId::E_SBS2BS,
        WishartId::E_SS2BSS2,
        WishartId::E_SS2BS,
        WishartId::E_SS2BS2S,
        WishartId::E_S2BS,
        WishartId::E_SS2S_BS2,
        WishartId::E_SS22BS,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WishartId::E_S => "E_S",
            WishartId::E_SBS => "E_SBS",
            WishartId::E_SBS2BS => "E_SBS2BS",
            WishartId::E_SS2BSS2 => "E_SS2BSS2",
            WishartId::E_SS2BS => "E_SS2BS",
            WishartId::E_SS2BS2S => "E_SS2BS2S",
            WishartId::E_S2BS => "E_S2BS",
            WishartId::E_SS2S_BS2 => "E_SS2S_BS2",
            WishartId::E_SS22BS => "E_SS22BS",
        }
    }

    /// The expression as a product, for reports.
    pub fn expression(&self) -> &'static str {
        match self {
            WishartId::E_S => "S1",
            WishartId::E_SBS => "S1 B S1",
            WishartId::E_SBS2BS => "S1 B S2 B S1",
            WishartId::E_SS2BSS2 => "S1 S2 B S1 S2",
            WishartId::E_SS2BS => "S1 S2 B S1",
            WishartId::E_SS2BS2S => "S1 S2 B S2 S1",
            WishartId::E_S2BS => "S1 S1 B S1",
            WishartId::E_SS2S_BS2 => "S1 S2 S1 B S2",
            WishartId::E_SS22BS => "S1 S2 S2 B S1",
        }
    }

    /// Identities whose closed form is only valid for `Σ = I`.
    pub fn requires_identity(&self) -> bool {
        !matches!(self, WishartId::E_S | WishartId::E_SBS | WishartId::E_SBS2BS)
    }

    fn sample(&self, s1: &DMatrix<f64>, s2: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WishartId::E_S => s1.clone(),
            WishartId::E_SBS => s1 * b * s1,
            WishartId::E_SBS2BS => s1 * b * s2 * b * s1,
            WishartId::E_SS2BSS2 => s1 * s2 * b * s1 * s2,
            WishartId::E_SS2BS => s1 * s2 * b * s1,
            WishartId::E_SS2BS2S => s1 * s2 * b * s2 * s1,
            WishartId::E_S2BS => s1 * s1 * b * s1,
            WishartId::E_SS2S_BS2 => s1 * s2 * s1 * b * s2,
            WishartId::E_SS22BS => s1 * s2 * s2 * b * s1,
        }
    }
}

impl fmt::Display for WishartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WishartId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WishartId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown Wishart identity '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartIdentity {
    pub id: WishartId,
    pub sigma: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl WishartIdentity {
    pub fn new(id: WishartId, sigma: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Self { id, sigma, b }
    }

    fn validate(&self) -> Result<DMatrix<f64>> {
        let p = self.sigma.nrows();
        if p == 0 || !self.sigma.is_square() || self.b.shape() != (p, p) {
            return Err(Error::invalid("Sigma and B must be square of the same size"));
        }
        if !linalg::is_symmetric(&self.b, 1e-12) {
            return Err(Error::invalid("B must be symmetric"));
        }
        let chol = linalg::cholesky_lower(&self.sigma).ok_or(Error::NotPositiveDefinite)?;
        if self.id.requires_identity() && (&self.sigma - DMatrix::identity(p, p)).amax() > 0.0 {
            return Err(Error::Precondition(format!("{} requires Sigma = I", self.id)));
        }
        Ok(chol)
    }

    /// Closed-form expectation, with the corrected coefficient for `E_SS2S_BS2`.
    pub fn closed_form(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(self.formula(2.0))
    }

    /// Closed form as published; differs from [`closed_form`](Self::closed_form)
    /// only for `E_SS2S_BS2`, whose published trace coefficient is 1.
    pub fn published_closed_form(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(self.formula(1.0))
    }

    fn formula(&self, trace_coef_5: f64) -> DMatrix<f64> {
        let (s, b) = (&self.sigma, &self.b);
        let p = s.nrows();
        let pf = p as f64;
        let eye = DMatrix::<f64>::identity(p, p);
        let tb = b.trace();
        match self.id {
            WishartId::E_S => s.clone(),
            WishartId::E_SBS => s * b * s * 2.0 + s * (s * b).trace(),
            WishartId::E_SBS2BS => s * b * s * b * s * 2.0 + s * (b * s * b * s).trace(),
            WishartId::E_SS2BSS2 => b * (pf + 6.0) + eye * (2.0 * tb),
            WishartId::E_SS2BS => b * 2.0 + eye * tb,
            WishartId::E_SS2BS2S => b * 4.0 + eye * ((4.0 + pf) * tb),
            WishartId::E_S2BS => b * (8.0 + 2.0 * pf) + eye * ((4.0 + pf) * tb),
            WishartId::E_SS2S_BS2 => b * (6.0 + pf) + eye * (trace_coef_5 * tb),
            WishartId::E_SS22BS => b * (4.0 + 2.0 * pf) + eye * ((2.0 + pf) * tb),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartCheck {
    pub mc_estimate: DMatrix<f64>,
    pub mc_se: DMatrix<f64>,
    pub closed_form: DMatrix<f64>,
    pub max_abs_z: f64,
}

impl WishartCheck {
    /// Largest entrywise `|mc - reference| / se` against any reference matrix.
    pub fn max_abs_z_against(&self, reference: &DMatrix<f64>) -> f64 {
        max_abs_z(&self.mc_estimate, &self.mc_se, reference)
    }
}

fn max_abs_z(est: &DMatrix<f64>, se: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    est.iter()
        .zip(se.iter())
        .zip(reference.iter())
        .map(|((e, s), r)| {
            let diff = (e - r).abs();
            if *s > 0.0 {
                diff / s
            } else if diff <= 1e-12 * (1.0 + r.abs()) {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

pub const MIN_WISHART_REPS: usize = 10_000;
const WISHART_BLOCK: usize = 10_000;

/// Monte Carlo average of the identity's expression over `reps` independent
/// draws, compared entrywise with the closed form.
///
/// Draws come in fixed blocks with their own seeds, so the result does not
/// depend on the thread count.
pub fn wishart_check(w: &WishartIdentity, reps: usize, seed: u64) -> Result<WishartCheck> {
    if reps < MIN_WISHART_REPS {
        return Err(Error::invalid(format!("wishart_check needs reps >= {MIN_WISHART_REPS}")));
    }
    let chol = w.validate()?;
    let closed_form = w.formula(2.0);
    let p = w.sigma.nrows();
    let blocks = reps.div_ceil(WISHART_BLOCK);
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let count = WISHART_BLOCK.min(reps - blk * WISHART_BLOCK);
            let mut rng = seeded(derive_seed(seed, blk as u64));
            // Centre on the closed form so the sums of squares stay well scaled.
            let mut sum = DMatrix::<f64>::zeros(p, p);
            let mut sum_sq = DMatrix::<f64>::zeros(p, p);
            let mut draw = || {
                let z = DVector::<f64>::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                let x = &chol * z;
                &x * x.transpose()
            };
            for _ in 0..count {
                let s1 = draw();
                let s2 = draw();
                let d = w.id.sample(&s1, &s2, &w.b) - &closed_form;
                sum_sq += d.component_mul(&d);
                sum += d;
            }
            (sum, sum_sq)
        })
        .collect();
    let mut sum = DMatrix::<f64>::zeros(p, p);
    let mut sum_sq = DMatrix::<f64>::zeros(p, p);
    for (s, q) in partial {
        sum += s;
        sum_sq += q;
    }
    let k = reps as f64;
    let mean_dev = &sum / k;
    let mc_se = (&sum_sq / k - mean_dev.component_mul(&mean_dev)).map(|v| (v.max(0.0) * k / (k - 1.0) / k).sqrt());
    let mc_estimate = &closed_form + &mean_dev;
    let max_abs_z = max_abs_z(&mc_estimate, &mc_se, &closed_form);
    Ok(WishartCheck { mc_estimate, mc_se, closed_form, max_abs_z })
}

/// Empirical coefficients of `E[θ̂_n - θ*] ≈ δ/n` and
/// `E[(θ̂_n - θ*)(θ̂_n - θ*)'] ≈ γ₁/n + Γ/n²`, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    pub delta: DVector<f64>,
    pub delta_se: DVector<f64>,
    /// First-order MSE coefficient.
    pub gamma1: DMatrix<f64>,
    pub gamma1_se: DMatrix<f64>,
    /// Second-order MSE coefficient, `γ₂ + γ₂' + γ₃ + γ₄ + γ₄'` in the expansion.
    pub second_order: DMatrix<f64>,
    pub second_order_se: DMatrix<f64>,
    /// Largest weighted residual `|observed - fitted| / se` over the grid (MSE fit).
    pub max_residual_z: f64,
    /// Set when the `1/n, 1/n²` design is nearly collinear.
    pub warning: Option<String>,
}

/// Default grid `{200p, 400p, 800p}`.
pub fn default_n_grid(p: usize) -> Vec<usize> {
    vec![200 * p, 400 * p, 800 * p]
}

/// Weighted fit of `y(n) = a/n + b/n²` (or `b/n` when `with_second` is false)
/// for one entry; returns `((a, b), (se_a, se_b), residuals)`.
fn wls_entry(ns: &[f64], y: &[f64], se: &[f64], with_second: bool) -> ((f64, f64), (f64, f64), f64) {
    let w: Vec<f64> = se.iter().map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1e300 }).collect();
    if !with_second {
        let num: f64 = ns.iter().zip(y).zip(&w).map(|((n, y), w)| w * y / n).sum();
        let den: f64 = ns.iter().zip(&w).map(|(n, w)| w / (n * n)).sum();
        let b = num / den;
        let res = max_res(ns, y, se, |n| b / n);
        return ((0.0, b), (0.0, den.recip().sqrt()), res);
    }
    // Scale columns by the smallest n to keep the normal equations well scaled.
    let n0 = ns.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut gram = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for ((n, yv), wv) in ns.iter().zip(y).zip(&w) {
        let row = Vector2::new(n0 / n, (n0 / n).powi(2));
        gram += row * row.transpose() * *wv;
        rhs += row * (wv * yv);
    }
    let inv = gram.try_inverse().unwrap_or_else(|| Matrix2::from_element(f64::NAN));
    let coef = inv * rhs;
    let (a, b) = (coef[0] * n0, coef[1] * n0 * n0);
    let res = max_res(ns, y, se, |n| a / n + b / (n * n));
    ((a, b), (inv[(0, 0)].sqrt() * n0, inv[(1, 1)].sqrt() * n0 * n0), res)
}

fn max_res(ns: &[f64], y: &[f64], se: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    ns.iter()
        .zip(y)
        .zip(se)
        .map(|((n, y), s)| if *s > 0.0 { (y - f(*n)).abs() / s } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Estimates bias and second moments of single-machine fits at each `n` in the
/// grid and fits the `1/n`, `1/n²` expansion entrywise by weighted least squares.
pub fn mc_moment_fit(
    cfg: &GenerativeConfig,
    model: &ModelSpec,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<MomentFit> {
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() < 3 {
        return Err(Error::invalid("n_grid needs at least 3 distinct sample sizes"));
    }
    let p = cfg.p();
    if grid[0] <= p {
        return Err(Error::invalid("every n in the grid must exceed p"));
    }
    if reps < 2 {
        return Err(Error::invalid("mc_moment_fit needs at least 2 replications"));
    }
    let k = reps as f64;
    let mut bias = Vec::new();
    let mut bias_se = Vec::new();
    let mut mom = Vec::new();
    let mut mom_se = Vec::new();
    for (i, &n) in grid.iter().enumerate() {
        let exp = ExperimentConfig::new(cfg.clone(), model.clone(), n, 1, reps, derive_seed(seed, i as u64))?;
        let errs: Vec<DVector<f64>> = run_experiment(&exp)?.into_iter().map(|r| r.bias_sample).collect();
        let mean = errs.iter().fold(DVector::zeros(p), |a, e| a + e) / k;
        let var = errs.iter().fold(DVector::zeros(p), |a, e| a + (e - &mean).map(|v| v * v)) / (k - 1.0);
        bias_se.push(var.map(|v| (v / k).sqrt()));
        bias.push(mean);
        let outer: Vec<DMatrix<f64>> = errs.iter().map(|e| e * e.transpose()).collect();
        let m2 = outer.iter().fold(DMatrix::zeros(p, p), |a, o| a + o) / k;
        let v2 = outer.iter().fold(DMatrix::zeros(p, p), |a, o| a + (o - &m2).map(|v| v * v)) / (k - 1.0);
        mom_se.push(v2.map(|v| (v / k).sqrt()));
        mom.push(m2);
    }
    let ns: Vec<f64> = grid.iter().map(|&n| n as f64).collect();
    let mut fit = MomentFit {
        delta: DVector::zeros(p),
        delta_se: DVector::zeros(p),
        gamma1: DMatrix::zeros(p, p),
        gamma1_se: DMatrix::zeros(p, p),
        second_order: DMatrix::zeros(p, p),
        second_order_se: DMatrix::zeros(p, p),
        max_residual_z: 0.0,
        warning: None,
    };
    for j in 0..p {
        let y: Vec<f64> = bias.iter().map(|b| b[j]).collect();
        let s: Vec<f64> = bias_se.iter().map(|b| b[j]).collect();
        let ((_, d), (_, dse), _) = wls_entry(&ns, &y, &s, false);
        fit.delta[j] = d;
        fit.delta_se[j] = dse;
    }
    for r in 0..p {
        for c in 0..p {
            let y: Vec<f64> = mom.iter().map(|m| m[(r, c)]).collect();
            let s: Vec<f64> = mom_se.iter().map(|m| m[(r, c)]).collect();
            let ((a, b), (sa, sb), res) = wls_entry(&ns, &y, &s, true);
            fit.gamma1[(r, c)] = a;
            fit.gamma1_se[(r, c)] = sa;
            fit.second_order[(r, c)] = b;
            fit.second_order_se[(r, c)] = sb;
            fit.max_residual_z = fit.max_residual_z.max(res);
        }
    }
    let spread = ns[ns.len() - 1] / ns[0];
    if spread < 2.0 {
        fit.warning = Some(format!(
            "n_grid spans only a factor {spread:.3}; the 1/n and 1/n^2 terms are poorly separated"
        ));
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for id in WishartId::ALL {
            assert_eq!(id.name().parse::<WishartId>().unwrap(), id);
        }
        assert!("E_XYZ".parse::<WishartId>().is_err());
    }

    #[test]
    fn closed_forms_on_identity() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let w = |id| WishartIdentity::new(id, eye.clone(), eye.clone()).closed_form().unwrap();
        assert_eq!(w(WishartId::E_S), eye);
        assert_eq!(w(WishartId::E_SBS), &eye * 4.0);
        assert_eq!(w(WishartId::E_SS2BSS2), &eye * 12.0);
        let published = WishartIdentity::new(WishartId::E_SS2S_BS2, eye.clone(), eye.clone());
        assert_eq!(published.published_closed_form().unwrap(), &eye * 10.0);
        assert_eq!(published.closed_form().unwrap(), &eye * 12.0);
    }

    #[test]
    fn preconditions() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::<f64>::identity(2, 2);
        let w = WishartIdentity::new(WishartId::E_S2BS, s.clone(), b.clone());
        assert!(matches!(wishart_check(&w, 10_000, 1), Err(Error::Precondition(_))));
        assert_eq!(WishartIdentity::new(WishartId::E_S, s.clone(), b.clone()).closed_form().unwrap(), s);
        let ok = WishartIdentity::new(WishartId::E_S, s, b);
        assert!(wishart_check(&ok, 9_999, 1).is_err());
        let asym = WishartIdentity::new(WishartId::E_S, DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert!(wishart_check(&asym, 10_000, 1).is_err());
    }

    #[test]
    fn check_is_deterministic() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let w = WishartIdentity::new(WishartId::E_SBS, eye.clone(), eye);
        let a = wishart_check(&w, 20_000, 5).unwrap();
        assert_eq!(a, wishart_check(&w, 20_000, 5).unwrap());
        assert!(a.max_abs_z < 5.0);
    }

    #[test]
    fn wls_recovers_exact_curve() {
        let ns = [100.0, 200.0, 400.0, 800.0];
        let y: Vec<f64> = ns.iter().map(|n| 2.0 / n - 7.0 / (n * n)).collect();
        let ((a, b), _, res) = wls_entry(&ns, &y, &[1e-4; 4], true);
        assert!((a - 2.0).abs() < 1e-9 && (b + 7.0).abs() < 1e-6 && res < 1e-6);
        let yb: Vec<f64> = ns.iter().map(|n| -0.5 / n).collect();
        let ((_, d), _, _) = wls_entry(&ns, &yb, &[1e-4; 4], false);
        assert!((d + 0.5).abs() < 1e-12);
    }
}
