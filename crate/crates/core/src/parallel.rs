//! The split-and-average protocol and its Monte Carlo replication engine.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{self, ModelSpec};
use crate::linalg;
use crate::model::{sample_dataset, split_uniform, Dataset, GenerativeConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub gen: GenerativeConfig,
    pub model: ModelSpec,
    pub n_total: usize,
    pub machines: usize,
    pub replications: usize,
    pub base_seed: u64,
}

impl ExperimentConfig {
    pub fn new(
        gen: GenerativeConfig,
        model: ModelSpec,
        n_total: usize,
        machines: usize,
        replications: usize,
        base_seed: u64,
    ) -> Result<Self> {
        if machines == 0 || n_total == 0 {
            return Err(Error::invalid("N and m must be >= 1"));
        }
        if n_total % machines != 0 {
            return Err(Error::Divisibility { rows: n_total, machines });
        }
        if replications == 0 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if model.link() != gen.link() {
            return Err(Error::invalid(format!(
                "model link {} differs from the generative link {}",
                model.link().name(),
                gen.link().name()
            )));
        }
        Ok(Self { gen, model, n_total, machines, replications, base_seed })
    }

    pub fn n_per_machine(&self) -> usize {
        self.n_total / self.machines
    }

    /// Population minimizer: the ridge target for penalized fits, `θ₀` otherwise.
    pub fn theta_star(&self) -> Result<DVector<f64>> {
        match self.model.penalty() {
            l if l > 0.0 => estimator::ridge_population_target(self.gen.theta0(), self.gen.sigma(), l),
            _ => Ok(self.gen.theta0().clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub theta_bar: DVector<f64>,
    pub theta_central: DVector<f64>,
    pub err_bar: f64,
    pub err_central: f64,
    /// `θ̄ - θ*`.
    pub bias_sample: DVector<f64>,
}

impl ReplicationResult {
    pub fn ratio(&self) -> f64 {
        self.err_bar / self.err_central
    }
}

/// Coordinatewise mean.
pub fn average_estimate(thetas: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = thetas.first().ok_or_else(|| Error::invalid("cannot average zero estimates"))?;
    if thetas.iter().any(|t| t.len() != first.len()) {
        return Err(Error::invalid("estimates differ in length"));
    }
    let mut sum = DVector::zeros(first.len());
    for t in thetas {
        sum += t;
    }
    Ok(sum / thetas.len() as f64)
}

struct ShardGram {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    n: usize,
}

fn solve_gram(g: &ShardGram, lambda: f64) -> Result<DVector<f64>> {
    let n = g.n as f64;
    let p = g.xty.len();
    let a = &g.gram / n + DMatrix::<f64>::identity(p, p) * lambda;
    linalg::spd_solve(&a, &(&g.xty / n))
        .filter(|_| linalg::sym_rcond(&a) > 1e-14)
        .ok_or(Error::RankDeficient { rows: g.n, cols: p })
}

/// One replication: sample `N` points, fit centrally and on `m` shards, average.
///
/// Least-squares models reuse the shard Gram matrices for the central fit.
pub fn run_replication(cfg: &ExperimentConfig, rep: usize) -> Result<ReplicationResult> {
    if rep >= cfg.replications {
        return Err(Error::invalid(format!(
            "replication index {rep} out of range (replications = {})",
            cfg.replications
        )));
    }
    let tag = |e: Error| Error::Replication { rep, source: Box::new(e) };
    let seed = derive_seed(cfg.base_seed, rep as u64);
    let data = sample_dataset(&cfg.gen, cfg.n_total, derive_seed(seed, 0)).map_err(tag)?;
    let shards = split_uniform(&data, cfg.machines, derive_seed(seed, 1)).map_err(tag)?;
    let machine_tag = |k: usize| move |e: Error| tag(Error::Machine { machine: k, source: Box::new(e) });

    let (thetas, theta_central) = match cfg.model.closed_form_penalty() {
        Some(lambda) => {
            let grams: Vec<ShardGram> = shards
                .iter()
                .map(|s| ShardGram { gram: s.x.tr_mul(&s.x), xty: s.x.tr_mul(&s.y), n: s.n() })
                .collect();
            let thetas = grams
                .iter()
                .enumerate()
                .map(|(k, g)| solve_gram(g, lambda).map_err(machine_tag(k)))
                .collect::<Result<Vec<_>>>()?;
            let central = if cfg.machines == 1 {
                thetas[0].clone()
            } else {
                let mut total = ShardGram {
                    gram: DMatrix::zeros(data.p(), data.p()),
                    xty: DVector::zeros(data.p()),
                    n: 0,
                };
                for g in &grams {
                    total.gram += &g.gram;
                    total.xty += &g.xty;
                    total.n += g.n;
                }
                solve_gram(&total, lambda).map_err(tag)?
            };
            (thetas, central)
        }
        None => {
            let thetas = shards
                .iter()
                .enumerate()
                .map(|(k, s)| estimator::fit(s, &cfg.model).map_err(machine_tag(k)))
                .collect::<Result<Vec<_>>>()?;
            let central = if cfg.machines == 1 {
                thetas[0].clone()
            } else {
                estimator::fit(&data, &cfg.model).map_err(tag)?
            };
            (thetas, central)
        }
    };
    finish(cfg, &thetas, theta_central)
}

fn finish(
    cfg: &ExperimentConfig,
    thetas: &[DVector<f64>],
    theta_central: DVector<f64>,
) -> Result<ReplicationResult> {
    let theta_star = cfg.theta_star()?;
    let theta_bar = average_estimate(thetas)?;
    let bias_sample = &theta_bar - &theta_star;
    Ok(ReplicationResult {
        err_bar: bias_sample.norm(),
        err_central: (&theta_central - &theta_star).norm(),
        theta_bar,
        theta_central,
        bias_sample,
    })
}

/// Fits every shard of an existing dataset and averages (no central fit).
pub fn split_and_average(d: &Dataset, model: &ModelSpec, m: usize, seed: u64) -> Result<DVector<f64>> {
    let shards = split_uniform(d, m, seed)?;
    let thetas = shards
        .iter()
        .enumerate()
        .map(|(k, s)| estimator::fit(s, model).map_err(|e| Error::Machine { machine: k, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    average_estimate(&thetas)
}

/// All replications, in replication order, computed on the rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReplicationResult>> {
    (0..cfg.replications).into_par_iter().map(|rep| run_replication(cfg, rep)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub reps: usize,
    pub median_ratio: f64,
    /// Raw median absolute deviation of the ratios (no consistency factor).
    pub mad_ratio: f64,
    /// Standard error of the median ratio, `1.2533 · sd / √reps`.
    pub median_ratio_se: f64,
    pub mean_bias: DVector<f64>,
    pub mean_bias_se: DVector<f64>,
    pub mse_bar: f64,
    pub mse_bar_se: f64,
    pub mse_central: f64,
    pub mse_central_se: f64,
}

impl Summary {
    pub fn mse_ratio(&self) -> f64 {
        self.mse_bar / self.mse_central
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let k = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / k;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

pub fn summarize(results: &[ReplicationResult]) -> Result<Summary> {
    if results.len() < 2 {
        return Err(Error::invalid("summaries need at least two replications"));
    }
    let reps = results.len();
    let p = results[0].bias_sample.len();
    let mut ratios: Vec<f64> = results.iter().map(ReplicationResult::ratio).collect();
    let (_, ratio_se) = mean_and_se(ratios.iter().copied());
    let median_ratio = median(&mut ratios);
    let mut dev: Vec<f64> = ratios.iter().map(|r| (r - median_ratio).abs()).collect();
    let mad_ratio = median(&mut dev);

    let mut mean_bias = DVector::zeros(p);
    let mut mean_bias_se = DVector::zeros(p);
    for j in 0..p {
        let (m, se) = mean_and_se(results.iter().map(|r| r.bias_sample[j]));
        mean_bias[j] = m;
        mean_bias_se[j] = se;
    }
    let (mse_bar, mse_bar_se) = mean_and_se(results.iter().map(|r| r.err_bar * r.err_bar));
    let (mse_central, mse_central_se) = mean_and_se(results.iter().map(|r| r.err_central * r.err_central));
    Ok(Summary {
        reps,
        median_ratio,
        mad_ratio,
        median_ratio_se: (std::f64::consts::PI / 2.0).sqrt() * ratio_se,
        mean_bias,
        mean_bias_se,
        mse_bar,
        mse_bar_se,
        mse_central,
        mse_central_se,
    })
}
