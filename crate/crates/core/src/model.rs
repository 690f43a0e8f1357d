//! Generative data models and uniform random splitting across machines.
//!
//! Rows of the design are i.i.d. `N(0, Σ)`. Responses follow one of three
//! links: linear `y = x'θ₀ + ε`, exponential `y = exp(x'θ₀) + ε`, or logistic
//! with `P(y = 1 | x) = 1 / (1 + exp(-x'θ₀))` and 0/1 encoding.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Covariance of the design rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaSpec {
    Identity,
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// Additive noise distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseDist {
    Gaussian { variance: f64 },
    /// Laplace with scale `b`; variance `2b²`.
    Laplace { scale: f64 },
}

impl NoiseDist {
    pub fn gaussian(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {variance}")));
        }
        Ok(NoiseDist::Gaussian { variance })
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("Laplace scale must be >= 0, got {scale}")));
        }
        Ok(NoiseDist::Laplace { scale })
    }

    /// Laplace noise with the given variance.
    pub fn laplace_with_variance(variance: f64) -> Result<Self> {
        Self::laplace((variance / 2.0).sqrt())
    }

    pub fn variance(&self) -> f64 {
        match *self {
            NoiseDist::Gaussian { variance } => variance,
            NoiseDist::Laplace { scale } => 2.0 * scale * scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseDist::Gaussian { .. } => "gaussian",
            NoiseDist::Laplace { .. } => "laplace",
        }
    }

    /// Draws one value; Laplace uses the inverse CDF of an open-interval uniform.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseDist::Gaussian { variance } => {
                let z: f64 = StandardNormal.sample(rng);
                variance.sqrt() * z
            }
            NoiseDist::Laplace { scale } => {
                let u: f64 = Open01.sample(rng);
                let centred = u - 0.5;
                -scale * centred.signum() * (1.0 - 2.0 * centred.abs()).ln()
            }
        }
    }
}

/// Response link of the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Linear,
    ExpNonlinear,
    Logistic,
}

impl Link {
    pub fn name(&self) -> &'static str {
        match self {
            Link::Linear => "linear",
            Link::ExpNonlinear => "exp_nonlinear",
            Link::Logistic => "logistic",
        }
    }
}

/// A validated generative model. Construction rejects non-PD covariances.
#[derive(Debug, Clone)]
pub struct GenerativeConfig {
    sigma_spec: SigmaSpec,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    theta0: DVector<f64>,
    noise: NoiseDist,
    link: Link,
}

impl GenerativeConfig {
    pub fn new(
        sigma_spec: SigmaSpec,
        theta0: DVector<f64>,
        noise: NoiseDist,
        link: Link,
    ) -> Result<Self> {
        let p = theta0.len();
        if p == 0 {
            return Err(Error::invalid("dimension p must be >= 1"));
        }
        let sigma = match &sigma_spec {
            SigmaSpec::Identity => DMatrix::identity(p, p),
            SigmaSpec::Diagonal(d) => {
                if d.len() != p {
                    return Err(Error::invalid("diagonal covariance length differs from p"));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            SigmaSpec::Dense(m) => {
                if m.nrows() != p || m.ncols() != p {
                    return Err(Error::invalid("covariance must be p x p"));
                }
                m.clone()
            }
        };
        let chol = crate::linalg::cholesky_lower(&sigma).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { sigma_spec, sigma, chol, theta0, noise, link })
    }

    /// Identity-covariance linear model, the most common configuration.
    pub fn linear_identity(theta0: DVector<f64>, noise: NoiseDist) -> Result<Self> {
        Self::new(SigmaSpec::Identity, theta0, noise, Link::Linear)
    }

    pub fn p(&self) -> usize {
        self.theta0.len()
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn sigma_spec(&self) -> &SigmaSpec {
        &self.sigma_spec
    }
    pub fn theta0(&self) -> &DVector<f64> {
        &self.theta0
    }
    pub fn noise(&self) -> NoiseDist {
        self.noise
    }
    pub fn link(&self) -> Link {
        self.link
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }
}

/// Coefficients `θ̃_j = j` rescaled to Euclidean norm `norm`.
pub fn ramp_coefficients(p: usize, norm: f64) -> DVector<f64> {
    let raw = DVector::from_fn(p, |j, _| (j + 1) as f64);
    let len = raw.norm();
    raw * (norm / len)
}

/// An `n × p` design with its response vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(rows), y: self.y.select_rows(rows) }
    }
}

fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Draws `n` observations from `cfg`. Bit-reproducible for fixed `(cfg, n, seed)`.
pub fn sample_dataset(cfg: &GenerativeConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("sample size n must be >= 1"));
    }
    let p = cfg.p();
    let mut rng = rng::seeded(seed);

    let mut z = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let x = match &cfg.sigma_spec {
        SigmaSpec::Identity => z,
        SigmaSpec::Diagonal(d) => {
            let mut z = z;
            for (j, v) in d.iter().enumerate() {
                z.column_mut(j).scale_mut(v.sqrt());
            }
            z
        }
        SigmaSpec::Dense(_) => z * cfg.chol.transpose(),
    };

    let index = &x * &cfg.theta0;
    let y = match cfg.link {
        Link::Linear => DVector::from_fn(n, |i, _| index[i] + cfg.noise.sample(&mut rng)),
        Link::ExpNonlinear => {
            DVector::from_fn(n, |i, _| index[i].exp() + cfg.noise.sample(&mut rng))
        }
        Link::Logistic => DVector::from_fn(n, |i, _| {
            let u: f64 = rng.random();
            if u < logistic(index[i]) {
                1.0
            } else {
                0.0
            }
        }),
    };
    Dataset::new(x, y)
}

/// Uniformly random partition of `d` into `m` shards of `n / m` rows.
///
/// A seeded Fisher–Yates shuffle of the row indices is cut into contiguous
/// chunks; rows inside each shard keep their original relative order, so a
/// shard depends only on which rows it holds.
pub fn split_uniform(d: &Dataset, m: usize, seed: u64) -> Result<Vec<Dataset>> {
    let n = d.n();
    if m == 0 {
        return Err(Error::invalid("number of machines must be >= 1"));
    }
    if n % m != 0 {
        return Err(Error::Divisibility { rows: n, machines: m });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if m > 1 {
        idx.shuffle(&mut rng::seeded(seed));
    }
    Ok(idx
        .chunks_mut(n / m)
        .map(|chunk| {
            chunk.sort_unstable();
            d.select_rows(chunk)
        })
        .collect())
}
