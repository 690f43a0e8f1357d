//! Second-order bias and MSE of split-and-average estimators in the
//! fixed-dimension regime.
//!
//! A [`GammaSet`] holds the moment vector `δ` and matrices `γ₀ … γ₄` of the
//! stochastic expansion of a single-machine estimator. With `n` samples per
//! machine and `m` machines:
//!
//! * bias: `δ / n`
//! * MSE: `((m-1)/m)(1/n²)γ₀ + (1/(mn))γ₁ + (1/(mn²))S`
//! * excess over one machine holding all `nm` samples:
//!   `((m-1)/m)(1/n²)γ₀ + ((m-1)/m²)(1/n²)S`
//!
//! where `S = γ₂ + γ₂' + γ₃ + γ₄ + γ₄'`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSet {
    pub delta: DVector<f64>,
    pub gamma0: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub gamma2: DMatrix<f64>,
    pub gamma3: DMatrix<f64>,
    pub gamma4: DMatrix<f64>,
}

impl GammaSet {
    pub fn p(&self) -> usize {
        self.delta.len()
    }

    /// `γ₂ + γ₂' + γ₃ + γ₄ + γ₄'`, the coefficient of `1/(mn²)` in the MSE.
    pub fn second_order_sum(&self) -> DMatrix<f64> {
        (&self.gamma2 + self.gamma2.transpose()) + &self.gamma3 + (&self.gamma4 + self.gamma4.transpose())
    }
}

/// Closed forms for the ridge `γ` matrices (identity design covariance).
///
/// `Corrected` is the result of carrying the Wishart moment algebra through
/// for every term. `Published` uses the widely quoted forms, whose `γ₃`/`γ₄`
/// disagree with simulation; `PublishedAlternateGamma2` additionally swaps the
/// `γ₂` coefficient of `A` from `2+p` to `3+p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RidgeGammaVariant {
    #[default]
    Corrected,
    Published,
    PublishedAlternateGamma2,
}

/// `λ^k / (1+λ)^l`.
pub fn lambda_kl(lambda: f64, k: i32, l: i32) -> f64 {
    lambda.powi(k) / (1.0 + lambda).powi(l)
}

/// `δ = 0`, `γ₀ = 0`, `γ₁ = σ²Σ⁻¹`, `γ₂ = -(1+p)σ²Σ⁻¹`, `γ₃ = γ₄ = (1+p)σ²Σ⁻¹`.
pub fn ols_gammas(sigma: &DMatrix<f64>, sigma2: f64) -> Result<GammaSet> {
    let p = sigma.nrows();
    if p == 0 || sigma.ncols() != p {
        return Err(Error::invalid("covariance must be a non-empty square matrix"));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {sigma2}")));
    }
    if linalg::cholesky_lower(sigma).is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let inv = linalg::spd_inverse(sigma).ok_or(Error::NotPositiveDefinite)? * sigma2;
    let k = 1.0 + p as f64;
    Ok(GammaSet {
        delta: DVector::zeros(p),
        gamma0: DMatrix::zeros(p, p),
        gamma1: inv.clone(),
        gamma2: &inv * -k,
        gamma3: &inv * k,
        gamma4: &inv * k,
    })
}

/// Ridge `γ` matrices for `Σ = I`, with `B = θ₀θ₀'` and `A = ‖θ₀‖²I`.
pub fn ridge_gammas(
    theta0: &DVector<f64>,
    sigma2: f64,
    lambda: f64,
    variant: RidgeGammaVariant,
) -> Result<GammaSet> {
    let p = theta0.len();
    if p == 0 {
        return Err(Error::invalid("dimension p must be >= 1"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {sigma2}")));
    }
    let pf = p as f64;
    let l = |k, l| lambda_kl(lambda, k, l);
    let b = theta0 * theta0.transpose();
    let eye = DMatrix::<f64>::identity(p, p);
    let a = &eye * theta0.norm_squared();
    let noise = &eye * (sigma2 * (1.0 + pf));

    let delta = theta0 * (-l(1, 3) * (1.0 + pf));
    let gamma0 = &b * (l(2, 6) * (1.0 + pf).powi(2));
    let gamma1 = (&b + &a) * l(2, 4) + &eye * (l(0, 2) * sigma2);

    let g2_a = match variant {
        RidgeGammaVariant::PublishedAlternateGamma2 => 3.0 + pf,
        _ => 2.0 + pf,
    };
    let gamma2 = -((&b * (4.0 + pf) + &a * g2_a) * l(2, 5)) - &noise * l(0, 3);

    let (gamma3, gamma4) = match variant {
        RidgeGammaVariant::Corrected => (
            (&b * (pf * pf + 3.0 * pf + 5.0) + &a * (2.0 + pf)) * l(2, 6) + &noise * l(0, 4),
            (&b * (2.0 * pf + 5.0) + &a * (2.0 * pf + 3.0)) * l(2, 6) + &noise * l(0, 4),
        ),
        RidgeGammaVariant::Published | RidgeGammaVariant::PublishedAlternateGamma2 => (
            (&b * (5.0 + pf + pf * pf) + &a * (2.0 + pf)) * l(2, 6) + &noise * l(0, 4),
            (&b * (5.0 + 2.0 * pf) + &a * (3.0 + 2.0 * pf)) * l(2, 5) + &noise * l(0, 3),
        ),
    };

    Ok(GammaSet { delta, gamma0, gamma1, gamma2, gamma3, gamma4 })
}

fn check_nm(n: f64, m: f64) -> Result<()> {
    if !(n >= 1.0) || !(m >= 1.0) {
        return Err(Error::invalid(format!("need n >= 1 and m >= 1, got n = {n}, m = {m}")));
    }
    Ok(())
}

/// Second-order bias `δ / n` of the averaged estimator (independent of `m`).
pub fn bias2(g: &GammaSet, n: f64, m: f64) -> Result<DVector<f64>> {
    check_nm(n, m)?;
    Ok(&g.delta / n)
}

/// Second-order MSE matrix of the average of `m` machines with `n` samples each.
pub fn m2_parallel(g: &GammaSet, n: f64, m: f64) -> Result<DMatrix<f64>> {
    check_nm(n, m)?;
    let frac = (m - 1.0) / m;
    Ok(&g.gamma0 * (frac / (n * n)) + &g.gamma1 / (m * n) + g.second_order_sum() / (m * n * n))
}

/// Excess second-order MSE of splitting over one machine holding all `nm` samples.
pub fn m2_excess(g: &GammaSet, n: f64, m: f64) -> Result<DMatrix<f64>> {
    check_nm(n, m)?;
    let frac = (m - 1.0) / m;
    Ok(&g.gamma0 * (frac / (n * n)) + g.second_order_sum() * ((m - 1.0) / (m * m * n * n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e1(p: usize) -> DVector<f64> {
        let mut v = DVector::zeros(p);
        v[0] = 1.0;
        v
    }

    #[test]
    fn ols_worked_values() {
        let g = ols_gammas(&DMatrix::identity(2, 2), 1.0).unwrap();
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(g.gamma1, i2);
        assert_eq!(g.gamma2, &i2 * -3.0);
        assert_eq!(g.gamma3, &i2 * 3.0);
        assert_eq!(g.gamma4, &i2 * 3.0);
        assert_eq!(g.delta, DVector::zeros(2));
        assert_eq!(g.gamma0, DMatrix::zeros(2, 2));

        let z = ols_gammas(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(z.second_order_sum().amax(), 0.0);
        assert_eq!(z.gamma1.amax(), 0.0);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ols_gammas(&bad, 1.0).is_err());
    }

    #[test]
    fn ols_trace_and_excess() {
        let (p, s2) = (5usize, 2.0);
        let g = ols_gammas(&DMatrix::identity(p, p), s2).unwrap();
        let (n, m) = (40.0, 3.0);
        let tr = m2_parallel(&g, n, m).unwrap().trace();
        let pf = p as f64;
        let expected = s2 * pf / (m * n) + (1.0 + pf) * s2 * pf / (m * n * n);
        assert!((tr - expected).abs() < 1e-14);

        let ex = m2_excess(&g, n, m).unwrap();
        let closed = DMatrix::<f64>::identity(p, p) * ((m - 1.0) / (m * m * n * n) * (1.0 + pf) * s2);
        assert!((&ex - &closed).amax() < 1e-15);
        assert!(linalg::sym_eigenvalues(&ex)[0] > 0.0);
        assert_eq!(m2_excess(&g, n, 1.0).unwrap().amax(), 0.0);
        assert_eq!(bias2(&g, n, m).unwrap(), DVector::zeros(p));
    }

    #[test]
    fn m1_collapse() {
        let g = ridge_gammas(&e1(3), 1.5, 0.4, RidgeGammaVariant::Corrected).unwrap();
        let n = 17.0;
        let direct = &g.gamma1 / n + g.second_order_sum() / (n * n);
        assert!((m2_parallel(&g, n, 1.0).unwrap() - direct).amax() < 1e-15);
    }

    #[test]
    fn ridge_reduces_to_ols_at_zero_penalty() {
        let theta = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let ols = ols_gammas(&DMatrix::identity(3, 3), 1.7).unwrap();
        for v in [
            RidgeGammaVariant::Corrected,
            RidgeGammaVariant::Published,
            RidgeGammaVariant::PublishedAlternateGamma2,
        ] {
            let r = ridge_gammas(&theta, 1.7, 0.0, v).unwrap();
            assert!((&r.gamma1 - &ols.gamma1).amax() < 1e-15);
            assert!((r.second_order_sum() - ols.second_order_sum()).amax() < 1e-14);
            assert_eq!(r.delta.amax(), 0.0);
        }
    }

    #[test]
    fn ridge_worked_values() {
        let g = ridge_gammas(&e1(2), 1.0, 1.0, RidgeGammaVariant::Corrected).unwrap();
        let mut expected = DMatrix::zeros(2, 2);
        expected[(0, 0)] = 9.0 / 64.0;
        assert!((&g.gamma0 - expected).amax() < 1e-15);

        let zero = ridge_gammas(&DVector::zeros(2), 1.0, 1.0, RidgeGammaVariant::Corrected).unwrap();
        assert_eq!(zero.gamma0.amax(), 0.0);
        assert!((zero.gamma1 - DMatrix::<f64>::identity(2, 2) * 0.25).amax() < 1e-15);

        let big = ridge_gammas(&e1(100), 1.0, 1.0, RidgeGammaVariant::Corrected).unwrap();
        let b = bias2(&big, 500.0, 4.0).unwrap();
        assert!((b[0] + 0.02525).abs() < 1e-15);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn ridge_variants_differ_only_where_documented() {
        let t = e1(2);
        let c = ridge_gammas(&t, 1.0, 1.0, RidgeGammaVariant::Corrected).unwrap();
        let p = ridge_gammas(&t, 1.0, 1.0, RidgeGammaVariant::Published).unwrap();
        let a = ridge_gammas(&t, 1.0, 1.0, RidgeGammaVariant::PublishedAlternateGamma2).unwrap();
        assert_eq!(c.gamma1, p.gamma1);
        assert_eq!(c.gamma2, p.gamma2);
        assert_ne!(p.gamma2, a.gamma2);
        assert_eq!(p.gamma3, a.gamma3);
        assert_ne!(c.gamma4, p.gamma4);
        // published excess is PD at this point; the corrected one is indefinite
        let pd = |g: &GammaSet| linalg::sym_eigenvalues(&m2_excess(g, 100.0, 4.0).unwrap())[0] > 0.0;
        assert!(pd(&p));
        assert!(!pd(&c));
    }

    fn random_gammas(p: usize, vals: &[f64]) -> GammaSet {
        let mut it = vals.iter().cycle().copied();
        let mut mat = |sym: bool| {
            let m = DMatrix::from_fn(p, p, |_, _| it.next().unwrap());
            if sym {
                linalg::symmetrize(&m)
            } else {
                m
            }
        };
        let (g1, g2, g3, g4) = (mat(true), mat(false), mat(true), mat(false));
        let delta = DVector::from_fn(p, |i, _| vals[i % vals.len()]);
        GammaSet { gamma0: &delta * delta.transpose(), delta, gamma1: g1, gamma2: g2, gamma3: g3, gamma4: g4 }
    }

    proptest! {
        #[test]
        fn excess_identity(p in 1usize..5, vals in prop::collection::vec(-3.0f64..3.0, 8..40),
                           n in 1.0f64..1e4, m in 1u32..200) {
            let g = random_gammas(p, &vals);
            let m = m as f64;
            let lhs = m2_excess(&g, n, m).unwrap();
            let rhs = m2_parallel(&g, n, m).unwrap() - m2_parallel(&g, n * m, 1.0).unwrap();
            let scale = m2_parallel(&g, n, m).unwrap().amax().max(1e-300);
            prop_assert!((lhs - &rhs).amax() <= 1e-12 * scale);
            prop_assert_eq!(g.gamma0.clone(), &g.delta * g.delta.transpose());
        }

        #[test]
        fn outputs_symmetric(p in 1usize..5, vals in prop::collection::vec(-3.0f64..3.0, 8..40),
                             n in 1.0f64..1e3, m in 1u32..50) {
            let g = random_gammas(p, &vals);
            let a = m2_parallel(&g, n, m as f64).unwrap();
            prop_assert_eq!(a.clone(), a.transpose());
        }

        #[test]
        fn bias_ratio_is_m(n in 1.0f64..1e4, m in 1u32..100, lambda in 0.01f64..5.0) {
            let g = ridge_gammas(&DVector::from_vec(vec![1.0, -2.0]), 1.0, lambda,
                                 RidgeGammaVariant::Corrected).unwrap();
            let m = m as f64;
            let r = bias2(&g, n, m).unwrap().component_div(&bias2(&g, n * m, 1.0).unwrap());
            prop_assert!(r.iter().all(|v| (v - m).abs() <= 1e-9 * m));
        }
    }
}
