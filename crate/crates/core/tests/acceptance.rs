//! Acceptance runner: evaluates the ten acceptance criteria and prints one
//! PASS/FAIL line for each. Exits non-zero when any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use splitavg::cli::{random_symmetric, table1, Table1Args};
use splitavg::estimator::{fit, sandwich_covariance, wald_intervals, ModelSpec};
use splitavg::fixed_p::{lambda_kl, m2_parallel, ols_gammas};
use splitavg::high_dim::{perturb_coeffs, solve_rc, QuadratureSpec, DEFAULT_SOLVER_TOL};
use splitavg::losses::LossSpec;
use splitavg::model::{ramp_coefficients, sample_dataset, GenerativeConfig, NoiseDist};
use splitavg::oracles::{wishart_check, WishartId, WishartIdentity};
use splitavg::parallel::{run_experiment, split_and_average, summarize, ExperimentConfig, ReplicationResult};
use splitavg::planner::{choose_m, Constraint, PlanMode, PlannerProblem, Regime};
use splitavg::rng::derive_seed;
use splitavg::stats::ks_standard_normal;

type Outcome = Result<(bool, String), splitavg::Error>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn gaussian(v: f64) -> NoiseDist {
    NoiseDist::gaussian(v).unwrap()
}

fn ols_config(p: usize, n_total: usize, m: usize, reps: usize, seed: u64) -> ExperimentConfig {
    let gen = GenerativeConfig::linear_identity(ramp_coefficients(p, 1.0), gaussian(1.0)).unwrap();
    ExperimentConfig::new(gen, ModelSpec::ols(), n_total, m, reps, seed).unwrap()
}

fn c1_table1() -> Outcome {
    let rows = table1(&Table1Args::default())?;
    let expected = [1.0, 1.0, 0.92, 1.3, 0.9, 1.83];
    let mut ok = true;
    let mut cells = Vec::new();
    for (row, want) in rows.iter().zip(expected) {
        let good = (row.r2_over_r1 - want).abs() <= 0.03;
        ok &= good;
        cells.push(format!(
            "{}/{} {:.4} vs {want}{}",
            row.loss,
            row.noise,
            row.r2_over_r1,
            if good { "" } else { " (off)" }
        ));
    }
    Ok((ok, cells.join("; ")))
}

fn c2_ls_law() -> Outcome {
    let q = QuadratureSpec::default();
    let mut worst: f64 = 0.0;
    for s2 in [1.0, 10.0] {
        for kappa in [0.05, 0.1, 0.2, 0.5] {
            let s = solve_rc(LossSpec::Squared, gaussian(s2), kappa, &q, DEFAULT_SOLVER_TOL)?;
            let r2 = kappa * s2 / (1.0 - kappa);
            let c = kappa / (1.0 - kappa);
            worst = worst.max((s.r2() / r2 - 1.0).abs()).max((s.c / c - 1.0).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} (tolerance 1e-6)")))
}

fn c3_sign() -> Outcome {
    let q = QuadratureSpec::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for s2 in [1.0, 10.0] {
        for noise in [gaussian(s2), NoiseDist::laplace_with_variance(s2)?] {
            let pc = perturb_coeffs(LossSpec::Squared, noise, &q)?;
            let exact = (pc.r1 - s2).abs() <= 1e-12 * s2 && (pc.r2 - s2).abs() <= 1e-12 * s2;
            let variant = pc.r2_plus_sign_variant();
            let variant_ok = (variant - 5.0 * s2).abs() <= 1e-10 * s2 && variant != pc.r2;
            ok &= exact && variant_ok;
            parts.push(format!("{} s2={s2}: r1={} r2={} variant={}", noise.name(), pc.r1, pc.r2, variant));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn c4_planner() -> Outcome {
    let ols = Regime::FixedP(ols_gammas(&DMatrix::identity(100, 100), 10.0)?);
    let fixed_total = choose_m(&PlannerProblem::new(PlanMode::FixedTotal(1_000_000), Constraint::Absolute(2e-3), ols.clone())?)?;
    let fixed_n = choose_m(&PlannerProblem::new(PlanMode::FixedPerMachine(10_000), Constraint::Absolute(2e-3), ols.clone())?)?;
    let relative = choose_m(&PlannerProblem::new(PlanMode::FixedTotal(1_000_000), Constraint::Relative(0.1), ols)?)?;
    let ok = fixed_total.m == 9901 && fixed_n.m == 51 && (990..=991).contains(&relative.m);
    Ok((ok, format!("fixed-N absolute m={}, fixed-n absolute m={}, fixed-N relative m={}", fixed_total.m, fixed_n.m, relative.m)))
}

fn c5_wishart() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for (i, id) in WishartId::ALL.into_iter().enumerate() {
        for p in [1usize, 2, 5] {
            let seed = derive_seed(500 + i as u64, p as u64);
            let w = WishartIdentity::new(id, DMatrix::identity(p, p), random_symmetric(p, derive_seed(seed, 99)));
            let c = wishart_check(&w, 1_000_000, seed)?;
            if c.max_abs_z > worst {
                worst = c.max_abs_z;
                worst_at = format!("{id} p={p}");
            }
        }
    }
    Ok((worst <= 4.0, format!("27 checks at 1e6 draws, max |z| = {worst:.2} ({worst_at})")))
}

/// Mean and standard error of a per-replication statistic.
fn mean_se(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let x: Vec<f64> = v.collect();
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

fn c6_ols_second_order() -> Outcome {
    let (p, n_total) = (20, 20_000);
    let g = ols_gammas(&DMatrix::identity(p, p), 1.0)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, m) in [10usize, 20, 40].into_iter().enumerate() {
        let res = run_experiment(&ols_config(p, n_total, m, 1000, derive_seed(600, i as u64)))?;
        let s = summarize(&res)?;
        let z_coord = s.mean_bias[0] / s.mean_bias_se[0];
        let (sum_mean, sum_se) = mean_se(res.iter().map(|r| r.bias_sample.sum()));
        let z_sum = sum_mean / sum_se;
        let theory = m2_parallel(&g, (n_total / m) as f64, m as f64)?.trace();
        let rel = s.mse_bar / theory - 1.0;
        let bias_ok = z_coord.abs() <= 3.0 && z_sum.abs() <= 3.0;
        let mse_ok = m > 20 || rel.abs() <= 0.05;
        ok &= bias_ok && mse_ok;
        parts.push(format!("m={m}: z(bias_1)={z_coord:.2} z(sum bias)={z_sum:.2} mse/theory-1={rel:+.3}"));
    }
    Ok((ok, parts.join("; ")))
}

fn c7_ridge_bias() -> Outcome {
    let (p, n_total, m, lambda) = (20, 20_000, 40, 1.0);
    let theta0 = ramp_coefficients(p, 1.0);
    let gen = GenerativeConfig::linear_identity(theta0.clone(), gaussian(1.0))?;
    let cfg = ExperimentConfig::new(gen, ModelSpec::ridge(lambda)?, n_total, m, 10_000, 700)?;
    let s = summarize(&run_experiment(&cfg)?)?;
    let n = cfg.n_per_machine() as f64;
    let theory: DVector<f64> = &theta0 * (-lambda_kl(lambda, 1, 3) * (1.0 + p as f64) / n);
    let z = (&s.mean_bias - &theory).component_div(&s.mean_bias_se);
    let worst = z.amax();
    Ok((worst <= 3.0, format!("n={n}, max |z| over {p} coordinates = {worst:.2}")))
}

fn c8_trend() -> Outcome {
    let mut stats = Vec::new();
    for (i, n) in [50usize, 200, 1000].into_iter().enumerate() {
        let s = summarize(&run_experiment(&ols_config(10, n * 10, 10, 200, derive_seed(800, i as u64)))?)?;
        stats.push((n, s.median_ratio, s.median_ratio_se));
    }
    let decreasing = stats.windows(2).all(|w| w[1].1 <= w[0].1 + 2.0 * (w[0].2.hypot(w[1].2)));
    let last = stats[2].1;
    let desc: Vec<String> = stats.iter().map(|(n, r, se)| format!("n={n}: {r:.4} (se {se:.4})")).collect();
    Ok((decreasing && last <= 1.05, desc.join("; ")))
}

/// Ratio of mean squared errors with a delta-method standard error.
fn mse_ratio_se(res: &[ReplicationResult]) -> (f64, f64) {
    let a: Vec<f64> = res.iter().map(|r| r.err_bar.powi(2)).collect();
    let b: Vec<f64> = res.iter().map(|r| r.err_central.powi(2)).collect();
    let k = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / k, b.iter().sum::<f64>() / k);
    let ratio = ma / mb;
    let var = a.iter().zip(&b).map(|(x, y)| (x - ratio * y).powi(2)).sum::<f64>() / (k - 1.0);
    (ratio, (var / k).sqrt() / mb)
}

fn c9_high_dim_ratio() -> Outcome {
    let (kappa, m) = (0.2_f64, 10usize);
    let target = (1.0 - kappa / m as f64) / (1.0 - kappa);
    let mut vals = Vec::new();
    for (i, n) in [250usize, 500].into_iter().enumerate() {
        let p = (kappa * n as f64).round() as usize;
        let mut theta0 = DVector::zeros(p);
        theta0[0] = 1.0;
        let gen = GenerativeConfig::linear_identity(theta0, gaussian(1.0))?;
        let cfg = ExperimentConfig::new(gen, ModelSpec::ols(), n * m, m, 300, derive_seed(900, i as u64))?;
        vals.push((n, mse_ratio_se(&run_experiment(&cfg)?)));
    }
    let within = vals.iter().all(|(_, (r, _))| (r / target - 1.0).abs() <= 0.05);
    let (r0, s0) = vals[0].1;
    let (r1, s1) = vals[1].1;
    let flat = (r1 - r0).abs() <= 3.0 * s0.hypot(s1);
    let desc: Vec<String> = vals.iter().map(|(n, (r, se))| format!("n={n}: {r:.4} (se {se:.4})")).collect();
    Ok((within && flat, format!("target {target:.4}; {}", desc.join("; "))))
}

fn c10_coverage_normality() -> Outcome {
    // Sandwich intervals for OLS, pooled over coordinates.
    let (n, p, reps) = (500, 5, 1000);
    let theta0 = ramp_coefficients(p, 1.0);
    let gen = GenerativeConfig::linear_identity(theta0.clone(), gaussian(1.0))?;
    let model = ModelSpec::ols();
    let mut covered = 0usize;
    for rep in 0..reps {
        let d = sample_dataset(&gen, n, derive_seed(1000, rep as u64))?;
        let th = fit(&d, &model)?;
        let cov = sandwich_covariance(&d, &th, &model)?;
        for (j, (lo, hi)) in wald_intervals(&th, &cov, n, 0.95)?.into_iter().enumerate() {
            covered += usize::from(lo <= theta0[j] && theta0[j] <= hi);
        }
    }
    let coverage = covered as f64 / (reps * p) as f64;

    // Standardized contrast e1'(θ̄ - θ₀) in the proportional regime.
    let (kappa, m, n_hd, reps_hd) = (0.2_f64, 10usize, 250usize, 500usize);
    let p_hd = (kappa * n_hd as f64).round() as usize;
    let gen_hd = GenerativeConfig::linear_identity(DVector::zeros(p_hd), gaussian(1.0))?;
    let scale = (kappa / (1.0 - kappa) / (m * p_hd) as f64).sqrt();
    let z: Vec<f64> = (0..reps_hd)
        .map(|rep| {
            let seed = derive_seed(1001, rep as u64);
            let d = sample_dataset(&gen_hd, n_hd * m, derive_seed(seed, 0))?;
            Ok(split_and_average(&d, &ModelSpec::ols(), m, derive_seed(seed, 1))?[0] / scale)
        })
        .collect::<Result<_, splitavg::Error>>()?;
    let ks = ks_standard_normal(&z)?;
    let ok = (coverage - 0.95).abs() <= 0.02 && ks.p_value >= 0.01;
    Ok((ok, format!("coverage {coverage:.4}; KS D={:.4} p={:.3}", ks.statistic, ks.p_value)))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "table1 ratios", limit: Some(Duration::from_secs(60)), run: c1_table1 },
        Criterion { id: 2, name: "least-squares residual law", limit: Some(Duration::from_secs(10)), run: c2_ls_law },
        Criterion { id: 3, name: "sign correction", limit: None, run: c3_sign },
        Criterion { id: 4, name: "planner numbers", limit: None, run: c4_planner },
        Criterion { id: 5, name: "Wishart identities", limit: Some(Duration::from_secs(120)), run: c5_wishart },
        Criterion { id: 6, name: "OLS second-order bias and MSE", limit: Some(Duration::from_secs(300)), run: c6_ols_second_order },
        Criterion { id: 7, name: "ridge bias", limit: Some(Duration::from_secs(600)), run: c7_ridge_bias },
        Criterion { id: 8, name: "error-ratio trend", limit: None, run: c8_trend },
        Criterion { id: 9, name: "high-dimensional MSE ratio", limit: None, run: c9_high_dim_ratio },
        Criterion { id: 10, name: "coverage and normality", limit: None, run: c10_coverage_normality },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((ok, detail)) => match c.limit {
                Some(limit) if elapsed > limit => (false, format!("{detail}; over time limit {limit:?}")),
                _ => (ok, detail),
            },
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {:>2} {}: {} [{:.1}s] {}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            detail
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
