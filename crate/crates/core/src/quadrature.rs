//! Gauss-Hermite rules and adaptive Gauss-Kronrod integration.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Gauss-Hermite rule for expectations under the standard normal:
/// `E[g(Z)] ≈ Σ wᵢ g(xᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
    pub fn new(n: usize) -> Self {
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// `E[g(μ + s Z)]`.
    pub fn expect<const K: usize>(&self, mu: f64, s: f64, g: impl Fn(f64) -> [f64; K]) -> [f64; K] {
        let mut acc = [0.0; K];
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = g(mu + s * x);
            for k in 0..K {
                acc[k] += w * v[k];
            }
        }
        acc
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Tolerances and budget of the adaptive integrator.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-14, rel_tol: 1e-11, max_panels: 2000 }
    }
}

struct Panel<const K: usize> {
    a: f64,
    b: f64,
    value: [f64; K],
    error: f64,
}

fn kronrod<const K: usize>(g: &impl Fn(f64) -> [f64; K], a: f64, b: f64) -> Result<Panel<K>> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k15 = [0.0; K];
    let mut g7 = [0.0; K];
    let eval = |x: f64| -> Result<[f64; K]> {
        let v = g(x);
        if v.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteIntegrand { at: x });
        }
        Ok(v)
    };
    let center = eval(c)?;
    for k in 0..K {
        k15[k] = WGK[7] * center[k];
        g7[k] = WG[3] * center[k];
    }
    for j in 0..7 {
        let dx = h * XGK[j];
        let lo = eval(c - dx)?;
        let hi = eval(c + dx)?;
        for k in 0..K {
            let s = lo[k] + hi[k];
            k15[k] += WGK[j] * s;
            if j % 2 == 1 {
                g7[k] += WG[j / 2] * s;
            }
        }
    }
    let mut error = 0.0_f64;
    for k in 0..K {
        k15[k] *= h;
        g7[k] *= h;
        error = error.max((k15[k] - g7[k]).abs());
    }
    Ok(Panel { a, b, value: k15, error })
}

/// Globally adaptive G7-K15 integral of a vector-valued function over `[a, b]`,
/// with panel boundaries forced at every breakpoint inside the interval.
pub fn integrate<const K: usize>(
    g: impl Fn(f64) -> [f64; K],
    a: f64,
    b: f64,
    breakpoints: &[f64],
    opts: AdaptiveOptions,
) -> Result<[f64; K]> {
    let mut cuts: Vec<f64> = vec![a, b];
    cuts.extend(breakpoints.iter().copied().filter(|&x| x > a && x < b));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut panels: Vec<Panel<K>> = cuts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| kronrod(&g, w[0], w[1]))
        .collect::<Result<_>>()?;
    loop {
        let mut total = [0.0; K];
        for p in &panels {
            for k in 0..K {
                total[k] += p.value[k];
            }
        }
        let err: f64 = panels.iter().map(|p| p.error).sum();
        let scale = total.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if err <= opts.abs_tol.max(opts.rel_tol * scale) {
            return Ok(total);
        }
        if panels.len() >= opts.max_panels {
            return Err(Error::QuadratureBudget { estimate: err });
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("at least one panel");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            // Interval exhausted at machine precision; accept what we have.
            return Ok(total);
        }
        panels.push(kronrod(&g, p.a, mid)?);
        panels.push(kronrod(&g, mid, p.b)?);
    }
}
