//! Residual-type losses with analytic derivatives through order four and
//! their proximal operators.

use crate::error::{Error, Result};

/// A loss `f(t)` of a scalar residual.
///
/// `Ridge` carries its penalty for the estimator; as a residual loss it is the
/// squared loss. `Logistic` is the softplus `ln(1 + e^t)` of the margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Squared,
    Ridge { lambda: f64 },
    PseudoHuber { delta: f64 },
    Absolute,
    Logistic,
}

pub const DEFAULT_PSEUDO_HUBER_DELTA: f64 = 3.0;

const PROX_TOL: f64 = 1e-12;
const PROX_MAX_ITER: usize = 100;

impl LossSpec {
    pub fn ridge(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("ridge penalty must be >= 0, got {lambda}")));
        }
        Ok(LossSpec::Ridge { lambda })
    }

    pub fn pseudo_huber(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!("pseudo-Huber scale must be > 0, got {delta}")));
        }
        Ok(LossSpec::PseudoHuber { delta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Squared => "squared",
            LossSpec::Ridge { .. } => "ridge",
            LossSpec::PseudoHuber { .. } => "pseudo_huber",
            LossSpec::Absolute => "absolute",
            LossSpec::Logistic => "logistic",
        }
    }

    /// Highest derivative order available everywhere.
    pub fn smooth_order(&self) -> usize {
        match self {
            LossSpec::Absolute => 1,
            _ => 4,
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth_order() >= 4
    }

    /// `f^(order)(t)`.
    pub fn derivative(&self, t: f64, order: usize) -> Result<f64> {
        if order > 4 {
            return Err(Error::UnsupportedDerivative { loss: self.name(), order });
        }
        match *self {
            LossSpec::Squared | LossSpec::Ridge { .. } => Ok(match order {
                0 => 0.5 * t * t,
                1 => t,
                2 => 1.0,
                _ => 0.0,
            }),
            LossSpec::PseudoHuber { delta } => Ok(pseudo_huber(t, delta, order)),
            LossSpec::Logistic => Ok(softplus(t, order)),
            LossSpec::Absolute => match order {
                0 => Ok(t.abs()),
                _ if t == 0.0 => Err(Error::NonDifferentiable { loss: self.name(), t }),
                1 => Ok(t.signum()),
                o => Err(Error::UnsupportedDerivative { loss: self.name(), order: o }),
            },
        }
    }

    /// `(f', f'', f''', f'''')` at `t` for smooth losses.
    pub fn derivatives_1to4(&self, t: f64) -> Result<[f64; 4]> {
        Ok([
            self.derivative(t, 1)?,
            self.derivative(t, 2)?,
            self.derivative(t, 3)?,
            self.derivative(t, 4)?,
        ])
    }

    /// Proximal map `argmin_x f(x) + (x - z)² / (2c)` and its derivative in `z`.
    pub fn prox(&self, c: f64, z: f64) -> Result<(f64, f64)> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("prox parameter c must be > 0, got {c}")));
        }
        match *self {
            LossSpec::Squared | LossSpec::Ridge { .. } => Ok((z / (1.0 + c), 1.0 / (1.0 + c))),
            LossSpec::Absolute => {
                if z.abs() > c {
                    Ok((z - c * z.signum(), 1.0))
                } else {
                    Ok((0.0, 0.0))
                }
            }
            LossSpec::PseudoHuber { .. } | LossSpec::Logistic => {
                let x = self.prox_newton(c, z)?;
                let f2 = self.derivative(x, 2)?;
                Ok((x, 1.0 / (1.0 + c * f2)))
            }
        }
    }

    /// Newton on `c f'(x) + x - z = 0`, kept inside a shrinking sign bracket.
    fn prox_newton(&self, c: f64, z: f64) -> Result<f64> {
        let f1z = self.derivative(z, 1)?;
        let other = z - c * f1z;
        let (mut lo, mut hi) = if other < z { (other, z) } else { (z, other) };
        if hi - lo <= PROX_TOL * (1.0 + z.abs()) {
            return Ok(0.5 * (lo + hi));
        }
        let mut x = z - c * f1z / (1.0 + c * self.derivative(z, 2)?);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let mut prev_g = f64::INFINITY;
        for _ in 0..PROX_MAX_ITER {
            let g = c * self.derivative(x, 1)? + x - z;
            if g == 0.0 {
                return Ok(x);
            }
            if g > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dg = 1.0 + c * self.derivative(x, 2)?;
            let mut next = x - g / dg;
            // Bisect when Newton leaves the bracket or stalls.
            if !(next > lo && next < hi) || g.abs() > 0.5 * prev_g {
                next = 0.5 * (lo + hi);
            }
            prev_g = g.abs();
            let step = (next - x).abs();
            x = next;
            if step <= PROX_TOL * (1.0 + x.abs()) || hi - lo <= PROX_TOL * (1.0 + x.abs()) {
                return Ok(x);
            }
        }
        Err(Error::ProxNonConvergence { c, z })
    }
}

fn pseudo_huber(t: f64, delta: f64, order: usize) -> f64 {
    let u = (t / delta).powi(2);
    let s = (1.0 + u).sqrt();
    let d2 = delta * delta;
    match order {
        0 => d2 * u / (s + 1.0),
        1 => t / s,
        2 => 1.0 / (s * s * s),
        3 => -3.0 * t / d2 / (s * s * s * s * s),
        _ => (12.0 * u - 3.0) / d2 / (s.powi(7)),
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64, order: usize) -> f64 {
    let s = sigmoid(t);
    let v = s * (1.0 - s);
    match order {
        0 => t.max(0.0) + (-t.abs()).exp().ln_1p(),
        1 => s,
        2 => v,
        3 => v * (1.0 - 2.0 * s),
        _ => v * (1.0 - 6.0 * s + 6.0 * s * s),
    }
}
