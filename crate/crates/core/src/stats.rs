//! Small statistical helpers: the normal CDF and a one-sample normality test.

use crate::error::{Error, Result};

/// `Φ(x)`, accurate in both tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov distribution tail `P(K > λ)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Kolmogorov-Smirnov test of `samples` against `N(0, 1)` (Stephens' small-sample correction).
pub fn ks_standard_normal(samples: &[f64]) -> Result<KsResult> {
    if samples.len() < 5 {
        return Err(Error::invalid("the KS test needs at least 5 samples"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("KS samples must be finite"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let statistic = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let p_value = kolmogorov_tail((sn + 0.12 + 0.11 / sn) * statistic);
    Ok(KsResult { statistic, p_value })
}
