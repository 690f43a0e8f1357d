//! Command-line front end: experiment recipes that write CSV.
//!
//! Every output starts with a `#` line listing the resolved configuration,
//! followed by a CSV header and one row per plotted point.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimator::ModelSpec;
use crate::fixed_p::{bias2, m2_parallel, ols_gammas, ridge_gammas, GammaSet, RidgeGammaVariant};
use crate::high_dim::{
    absolute_series, default_series_grid, mse_ratio_exact, perturb_coeffs, QuadScheme, QuadratureSpec,
};
use crate::losses::{LossSpec, DEFAULT_PSEUDO_HUBER_DELTA};
use crate::model::{ramp_coefficients, GenerativeConfig, Link, NoiseDist};
use crate::oracles::{wishart_check, WishartId, WishartIdentity};
use crate::parallel::{run_experiment, summarize, ExperimentConfig};
use crate::planner::{choose_m, Constraint, HighDimRegime, PlanMode, PlannerProblem, Regime};
use crate::rng::{derive_seed, seeded};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SPLITAVG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "splitavg", version, about = "Split-and-average M-estimation experiments", args_override_self = true)]
struct Cli {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for Monte Carlo work.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Median error ratio of averaged vs centralized fits over a grid of n.
    RatioSweep(RatioSweepArgs),
    /// Empirical bias and MSE against the second-order expressions.
    BiasMse(BiasMseArgs),
    /// High-dimensional MSE ratio, simulated vs predicted.
    HighdimSweep(HighdimArgs),
    /// Ratio r2/r1 of the small-kappa expansion of r^2 for three losses and two noises.
    Table1(Table1Args),
    /// Choose the number of machines under a memory or sample budget.
    Plan(PlanArgs),
    /// Monte Carlo check of the Wishart moment identities.
    WishartCheck(WishartArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ols,
    Ridge,
    Nls,
    Logistic,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    PseudoHuber,
    Absolute,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaKind {
    Corrected,
    Published,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    #[value(name = "fixed-n")]
    FixedN,
    #[value(name = "fixed-N")]
    FixedTotal,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    FixedP,
    HighDim,
}

/// Counts written either as integers or in float notation (`1e6`).
fn parse_count(s: &str) -> std::result::Result<usize, String> {
    if let Ok(v) = s.parse::<usize>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("'{s}' is not a count"))?;
    if f >= 0.0 && f.fract() == 0.0 && f < 9.0e15 {
        Ok(f as usize)
    } else {
        Err(format!("'{s}' is not a non-negative integer"))
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, default_value_t = 10)]
    pub p: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, value_enum, default_value_t = NoiseKind::Gaussian)]
    pub noise: NoiseKind,
    /// Euclidean norm of the true coefficient vector (linearly increasing entries).
    #[arg(long, default_value_t = 1.0)]
    pub theta_norm: f64,
    #[arg(long, value_enum, default_value_t = ModelKind::Ols)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_parser = parse_count, default_value = "200")]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl DataArgs {
    fn describe(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", format!("{:?}", self.model).to_lowercase()),
            ("p", self.p.to_string()),
            ("sigma2", self.sigma2.to_string()),
            ("noise", format!("{:?}", self.noise).to_lowercase()),
            ("theta_norm", self.theta_norm.to_string()),
            ("lambda", self.lambda.to_string()),
            ("reps", self.reps.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn noise_dist(&self) -> Result<NoiseDist> {
        noise_dist(self.noise, self.sigma2)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(match self.model {
            ModelKind::Ols => ModelSpec::ols(),
            ModelKind::Ridge => ModelSpec::ridge(self.lambda)?,
            ModelKind::Nls => ModelSpec::nonlinear_least_squares(),
            ModelKind::Logistic => ModelSpec::logistic(),
        })
    }

    pub fn generative(&self) -> Result<GenerativeConfig> {
        if self.p == 0 {
            return Err(Error::invalid("p must be >= 1"));
        }
        let link = match self.model {
            ModelKind::Ols | ModelKind::Ridge => Link::Linear,
            ModelKind::Nls => Link::ExpNonlinear,
            ModelKind::Logistic => Link::Logistic,
        };
        Ok(GenerativeConfig::linear_identity(ramp_coefficients(self.p, self.theta_norm), self.noise_dist()?)?
            .with_link(link))
    }

    fn gammas(&self, variant: RidgeGammaVariant) -> Result<GammaSet> {
        let gen = self.generative()?;
        match self.model {
            ModelKind::Ols => ols_gammas(gen.sigma(), self.sigma2),
            ModelKind::Ridge => ridge_gammas(gen.theta0(), self.sigma2, self.lambda, variant),
            _ => Err(Error::invalid("second-order theory is available for ols and ridge only")),
        }
    }
}

fn noise_dist(kind: NoiseKind, variance: f64) -> Result<NoiseDist> {
    match kind {
        NoiseKind::Gaussian => NoiseDist::gaussian(variance),
        NoiseKind::Laplace => NoiseDist::laplace_with_variance(variance),
    }
}

#[derive(Args, Debug, Clone)]
pub struct RatioSweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Machine counts (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize])]
    pub m: Vec<usize>,
    /// Per-machine sample sizes (comma separated).
    #[arg(long, value_delimiter = ',', value_parser = parse_count, default_values_t = vec![50usize, 100, 200, 500, 1000])]
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub n: usize,
    pub m: usize,
    pub median_ratio: f64,
    pub mad_ratio: f64,
    pub reps: usize,
}

pub fn ratio_sweep(a: &RatioSweepArgs) -> Result<Vec<RatioRow>> {
    let gen = a.data.generative()?;
    let model = a.data.model_spec()?;
    let mut rows = Vec::new();
    for (i, &m) in a.m.iter().enumerate() {
        for (j, &n) in a.n.iter().enumerate() {
            let seed = derive_seed(derive_seed(a.data.seed, i as u64), j as u64);
            let cfg = ExperimentConfig::new(gen.clone(), model.clone(), n * m, m, a.data.reps, seed)?;
            let s = summarize(&run_experiment(&cfg)?)?;
            rows.push(RatioRow { n, m, median_ratio: s.median_ratio, mad_ratio: s.mad_ratio, reps: s.reps });
        }
    }
    Ok(rows)
}

#[derive(Args, Debug, Clone)]
pub struct BiasMseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Total sample size N.
    #[arg(long = "total-n", value_parser = parse_count, default_value = "20000")]
    pub total_n: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20, 40])]
    pub m: Vec<usize>,
    /// Coordinate reported in the bias columns (0-based).
    #[arg(long, default_value_t = 0)]
    pub coord: usize,
    #[arg(long, value_enum, default_value_t = GammaKind::Corrected)]
    pub gammas: GammaKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasMseRow {
    pub m: usize,
    pub p: usize,
    pub coord: usize,
    pub mean_bias: f64,
    pub theory_bias: f64,
    pub mse_emp: f64,
    pub mse_theory: f64,
}

pub fn bias_mse(a: &BiasMseArgs) -> Result<Vec<BiasMseRow>> {
    if a.coord >= a.data.p {
        return Err(Error::invalid(format!("coord {} out of range for p = {}", a.coord, a.data.p)));
    }
    let variant = match a.gammas {
        GammaKind::Corrected => RidgeGammaVariant::Corrected,
        GammaKind::Published => RidgeGammaVariant::Published,
    };
    let g = a.data.gammas(variant)?;
    let gen = a.data.generative()?;
    let model = a.data.model_spec()?;
    let mut rows = Vec::new();
    for (i, &m) in a.m.iter().enumerate() {
        let cfg = ExperimentConfig::new(gen.clone(), model.clone(), a.total_n, m, a.data.reps, derive_seed(a.data.seed, i as u64))?;
        let s = summarize(&run_experiment(&cfg)?)?;
        let n = cfg.n_per_machine() as f64;
        rows.push(BiasMseRow {
            m,
            p: a.data.p,
            coord: a.coord,
            mean_bias: s.mean_bias[a.coord],
            theory_bias: bias2(&g, n, m as f64)?[a.coord],
            mse_emp: s.mse_bar,
            mse_theory: m2_parallel(&g, n, m as f64)?.trace(),
        });
    }
    Ok(rows)
}

#[derive(Args, Debug, Clone)]
pub struct HighdimArgs {
    #[arg(long, default_value_t = 0.2)]
    pub kappa: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize])]
    pub m: Vec<usize>,
    /// Per-machine sample sizes; `p = round(kappa * n)`.
    #[arg(long, value_delimiter = ',', value_parser = parse_count, default_values_t = vec![250usize, 500])]
    pub n: Vec<usize>,
    #[arg(long, value_enum, default_value_t = LossKind::Squared)]
    pub loss: LossKind,
    #[arg(long, default_value_t = DEFAULT_PSEUDO_HUBER_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, value_enum, default_value_t = NoiseKind::Gaussian)]
    pub noise: NoiseKind,
    #[arg(long, value_parser = parse_count, default_value = "300")]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighdimRow {
    pub n: usize,
    pub m: usize,
    pub kappa: f64,
    pub mse_ratio_emp: f64,
    pub mse_ratio_theory: f64,
}

fn loss_spec(kind: LossKind, delta: f64) -> Result<LossSpec> {
    Ok(match kind {
        LossKind::Squared => LossSpec::Squared,
        LossKind::PseudoHuber => LossSpec::pseudo_huber(delta)?,
        LossKind::Absolute => LossSpec::Absolute,
    })
}

pub fn highdim_sweep(a: &HighdimArgs) -> Result<Vec<HighdimRow>> {
    if !(a.kappa > 0.0 && a.kappa < 1.0) {
        return Err(Error::InfeasibleRegime(a.kappa));
    }
    let loss = loss_spec(a.loss, a.delta)?;
    let model = ModelSpec::new(loss, Link::Linear)?;
    let noise = noise_dist(a.noise, a.sigma2)?;
    let q = QuadratureSpec::default();
    let mut rows = Vec::new();
    for (i, &m) in a.m.iter().enumerate() {
        for (j, &n) in a.n.iter().enumerate() {
            let p = (a.kappa * n as f64).round() as usize;
            if p == 0 || p >= n {
                return Err(Error::invalid(format!("kappa * n = {p} is not a usable dimension for n = {n}")));
            }
            let kappa = p as f64 / n as f64;
            // Contrast direction is isotropic in this design, so θ₀ = e₁ loses nothing.
            let mut theta0 = nalgebra::DVector::zeros(p);
            theta0[0] = 1.0;
            let gen = GenerativeConfig::linear_identity(theta0, noise)?;
            let seed = derive_seed(derive_seed(a.seed, i as u64), j as u64);
            let cfg = ExperimentConfig::new(gen, model.clone(), n * m, m, a.reps, seed)?;
            let s = summarize(&run_experiment(&cfg)?)?;
            rows.push(HighdimRow {
                n,
                m,
                kappa,
                mse_ratio_emp: s.mse_ratio(),
                mse_ratio_theory: mse_ratio_exact(loss, noise, kappa, m as f64, &q)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Args, Debug, Clone)]
pub struct Table1Args {
    #[arg(long, default_value_t = DEFAULT_PSEUDO_HUBER_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 64)]
    pub nodes: usize,
    #[arg(long, value_enum, default_value_t = SchemeKind::GaussHermite)]
    pub scheme: SchemeKind,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    GaussHermite,
    Adaptive,
}

impl Default for Table1Args {
    fn default() -> Self {
        Self { delta: DEFAULT_PSEUDO_HUBER_DELTA, sigma2: 1.0, nodes: 64, scheme: SchemeKind::GaussHermite }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Row {
    pub loss: &'static str,
    pub noise: &'static str,
    pub r2_over_r1: f64,
}

pub fn table1(a: &Table1Args) -> Result<Vec<Table1Row>> {
    let scheme = match a.scheme {
        SchemeKind::GaussHermite => QuadScheme::GaussHermite,
        SchemeKind::Adaptive => QuadScheme::Adaptive,
    };
    let q = QuadratureSpec::new(a.nodes, scheme)?;
    let losses = [LossSpec::Squared, LossSpec::pseudo_huber(a.delta)?, LossSpec::Absolute];
    let noises = [noise_dist(NoiseKind::Gaussian, a.sigma2)?, noise_dist(NoiseKind::Laplace, a.sigma2)?];
    let mut rows = Vec::new();
    for loss in losses {
        for noise in noises {
            let r2_over_r1 = if loss.is_smooth() {
                perturb_coeffs(loss, noise, &q)?.ratio()
            } else {
                let (r1, r2) = absolute_series(noise, &default_series_grid(), &q)?;
                r2 / r1
            };
            rows.push(Table1Row { loss: loss.name(), noise: noise.name(), r2_over_r1 });
        }
    }
    Ok(rows)
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    #[arg(long, value_enum)]
    pub mode: ModeKind,
    /// Per-machine sample size (fixed-n mode).
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    /// Total sample size (fixed-N mode).
    #[arg(long = "N", value_parser = parse_count)]
    pub total: Option<usize>,
    #[arg(long)]
    pub p: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Bound on the total MSE.
    #[arg(long, group = "bound")]
    pub total_eps: Option<f64>,
    /// Bound on the per-coordinate MSE (total bound = p times this).
    #[arg(long, group = "bound")]
    pub coord_eps: Option<f64>,
    /// Allowed fractional excess over the single-machine error.
    #[arg(long, group = "bound")]
    pub rel_eps: Option<f64>,
    #[arg(long, value_enum, default_value_t = RegimeKind::FixedP)]
    pub regime: RegimeKind,
    /// Estimator for the fixed-p regime: ols or ridge.
    #[arg(long, value_enum, default_value_t = ModelKind::Ols)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub theta_norm: f64,
    #[arg(long, value_enum, default_value_t = LossKind::Squared)]
    pub loss: LossKind,
    #[arg(long, default_value_t = DEFAULT_PSEUDO_HUBER_DELTA)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = NoiseKind::Gaussian)]
    pub noise: NoiseKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub mode: &'static str,
    pub constraint: &'static str,
    pub m: usize,
    pub achieved_error: f64,
}

impl PlanArgs {
    pub fn problem(&self) -> Result<PlannerProblem> {
        let mode = match (self.mode, self.n, self.total) {
            (ModeKind::FixedN, Some(n), _) => PlanMode::FixedPerMachine(n),
            (ModeKind::FixedTotal, _, Some(t)) => PlanMode::FixedTotal(t),
            (ModeKind::FixedN, None, _) => return Err(Error::invalid("fixed-n mode needs --n")),
            (ModeKind::FixedTotal, _, None) => return Err(Error::invalid("fixed-N mode needs --N")),
        };
        let constraint = match (self.total_eps, self.coord_eps, self.rel_eps) {
            (Some(e), _, _) => Constraint::Absolute(e),
            (_, Some(e), _) => Constraint::Absolute(e * self.p as f64),
            (_, _, Some(e)) => Constraint::Relative(e),
            _ => return Err(Error::invalid("one of --total-eps, --coord-eps, --rel-eps is required")),
        };
        if self.p == 0 {
            return Err(Error::invalid("p must be >= 1"));
        }
        let noise = noise_dist(self.noise, self.sigma2)?;
        let regime = match self.regime {
            RegimeKind::FixedP => {
                let eye = DMatrix::identity(self.p, self.p);
                Regime::FixedP(match self.model {
                    ModelKind::Ols => ols_gammas(&eye, noise.variance())?,
                    ModelKind::Ridge => ridge_gammas(
                        &ramp_coefficients(self.p, self.theta_norm),
                        noise.variance(),
                        self.lambda,
                        RidgeGammaVariant::default(),
                    )?,
                    _ => return Err(Error::invalid("planning in the fixed-p regime supports ols and ridge")),
                })
            }
            RegimeKind::HighDim => {
                Regime::HighDim(HighDimRegime::isotropic(loss_spec(self.loss, self.delta)?, noise, self.p)?)
            }
        };
        PlannerProblem::new(mode, constraint, regime)
    }
}

pub fn plan(a: &PlanArgs) -> Result<PlanRow> {
    let prob = a.problem()?;
    let r = choose_m(&prob)?;
    Ok(PlanRow { mode: prob.mode.name(), constraint: prob.constraint.name(), m: r.m, achieved_error: r.achieved_error })
}

#[derive(Args, Debug, Clone)]
pub struct WishartArgs {
    /// Identity names (comma separated); all nine when omitted.
    #[arg(long, value_delimiter = ',')]
    pub id: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5])]
    pub p: Vec<usize>,
    #[arg(long, value_parser = parse_count, default_value = "1000000")]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WishartRow {
    pub id: WishartId,
    pub p: usize,
    pub reps: usize,
    pub max_abs_z: f64,
}

/// Random symmetric `B` with standard normal entries, seeded.
pub fn random_symmetric(p: usize, seed: u64) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seeded(seed);
    let a = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    (&a + a.transpose()) * 0.5
}

pub fn wishart_rows(a: &WishartArgs) -> Result<Vec<WishartRow>> {
    let ids = if a.id.is_empty() {
        WishartId::ALL.to_vec()
    } else {
        a.id.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?
    };
    let mut rows = Vec::new();
    for (i, id) in ids.into_iter().enumerate() {
        for (j, &p) in a.p.iter().enumerate() {
            if p == 0 {
                return Err(Error::invalid("p must be >= 1"));
            }
            let seed = derive_seed(derive_seed(a.seed, i as u64), j as u64);
            let b = random_symmetric(p, derive_seed(seed, u64::MAX));
            let w = WishartIdentity::new(id, DMatrix::identity(p, p), b);
            let c = wishart_check(&w, a.reps, seed)?;
            rows.push(WishartRow { id, p, reps: a.reps, max_abs_z: c.max_abs_z });
        }
    }
    Ok(rows)
}

/// Inserts the `key = value` pairs of `--config FILE` right after the
/// subcommand name, so explicit flags (parsed later) override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("cannot read config file {path}: {e}")))?;
    let mut extra = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("{path}:{}: expected key = value", lineno + 1)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        let value = v.trim();
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => {
                extra.push(format!("--{key}"));
                extra.push(value.to_string());
            }
        }
    }
    let names = ["ratio-sweep", "bias-mse", "highdim-sweep", "table1", "plan", "wishart-check"];
    let pos = strs
        .iter()
        .position(|a| names.contains(&a.as_str()))
        .ok_or_else(|| Error::invalid("a subcommand is required"))?;
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend(args[pos + 1..].iter().cloned());
    Ok(out)
}

fn header(cmd: &str, kv: &[(&str, String)]) -> String {
    let body: Vec<String> = kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# splitavg {cmd} {}\n", body.join(" "))
}

fn emit(out: &Option<PathBuf>, head: &str, write_rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_rows(&mut w)?;
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut bytes = head.as_bytes().to_vec();
    bytes.extend(body);
    match out {
        Some(path) => write_file(path, &bytes),
        None => {
            io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn f(x: f64) -> String {
    format!("{x:.10e}")
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::invalid("threads must be >= 1"));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = cli.out;
    match cli.cmd {
        Cmd::RatioSweep(a) => {
            let mut kv = a.data.describe();
            kv.push(("m", join(&a.m)));
            kv.push(("n", join(&a.n)));
            let rows = ratio_sweep(&a)?;
            emit(&out, &header("ratio-sweep", &kv), |w| {
                w.write_record(["n", "m", "median_ratio", "mad_ratio", "reps"])?;
                for r in rows {
                    w.write_record([r.n.to_string(), r.m.to_string(), f(r.median_ratio), f(r.mad_ratio), r.reps.to_string()])?;
                }
                Ok(())
            })
        }
        Cmd::BiasMse(a) => {
            let mut kv = a.data.describe();
            kv.push(("total_n", a.total_n.to_string()));
            kv.push(("m", join(&a.m)));
            kv.push(("coord", a.coord.to_string()));
            kv.push(("gammas", format!("{:?}", a.gammas).to_lowercase()));
            let rows = bias_mse(&a)?;
            emit(&out, &header("bias-mse", &kv), |w| {
                w.write_record(["m", "p", "coord", "mean_bias", "theory_bias", "mse_emp", "mse_theory"])?;
                for r in rows {
                    w.write_record([
                        r.m.to_string(),
                        r.p.to_string(),
                        r.coord.to_string(),
                        f(r.mean_bias),
                        f(r.theory_bias),
                        f(r.mse_emp),
                        f(r.mse_theory),
                    ])?;
                }
                Ok(())
            })
        }
        Cmd::HighdimSweep(a) => {
            let kv = vec![
                ("kappa", a.kappa.to_string()),
                ("m", join(&a.m)),
                ("n", join(&a.n)),
                ("loss", format!("{:?}", a.loss).to_lowercase()),
                ("delta", a.delta.to_string()),
                ("sigma2", a.sigma2.to_string()),
                ("noise", format!("{:?}", a.noise).to_lowercase()),
                ("reps", a.reps.to_string()),
                ("seed", a.seed.to_string()),
            ];
            let rows = highdim_sweep(&a)?;
            emit(&out, &header("highdim-sweep", &kv), |w| {
                w.write_record(["n", "m", "kappa", "mse_ratio_emp", "mse_ratio_theory"])?;
                for r in rows {
                    w.write_record([r.n.to_string(), r.m.to_string(), f(r.kappa), f(r.mse_ratio_emp), f(r.mse_ratio_theory)])?;
                }
                Ok(())
            })
        }
        Cmd::Table1(a) => {
            let kv = vec![
                ("delta", a.delta.to_string()),
                ("sigma2", a.sigma2.to_string()),
                ("nodes", a.nodes.to_string()),
                ("scheme", format!("{:?}", a.scheme).to_lowercase()),
            ];
            let rows = table1(&a)?;
            emit(&out, &header("table1", &kv), |w| {
                w.write_record(["loss", "noise", "r2_over_r1"])?;
                for r in rows {
                    w.write_record([r.loss.to_string(), r.noise.to_string(), f(r.r2_over_r1)])?;
                }
                Ok(())
            })
        }
        Cmd::Plan(a) => {
            let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
            let kv = vec![
                ("mode", if a.mode == ModeKind::FixedN { "fixed-n" } else { "fixed-N" }.to_string()),
                ("n", a.n.map_or_else(|| "none".into(), |v| v.to_string())),
                ("N", a.total.map_or_else(|| "none".into(), |v| v.to_string())),
                ("p", a.p.to_string()),
                ("sigma2", a.sigma2.to_string()),
                ("total_eps", opt(a.total_eps)),
                ("coord_eps", opt(a.coord_eps)),
                ("rel_eps", opt(a.rel_eps)),
                ("regime", format!("{:?}", a.regime).to_lowercase()),
                ("model", format!("{:?}", a.model).to_lowercase()),
                ("lambda", a.lambda.to_string()),
                ("loss", format!("{:?}", a.loss).to_lowercase()),
                ("noise", format!("{:?}", a.noise).to_lowercase()),
            ];
            let r = plan(&a)?;
            emit(&out, &header("plan", &kv), |w| {
                w.write_record(["mode", "constraint", "m", "achieved_error"])?;
                w.write_record([r.mode.to_string(), r.constraint.to_string(), r.m.to_string(), f(r.achieved_error)])?;
                Ok(())
            })
        }
        Cmd::WishartCheck(a) => {
            let kv = vec![
                ("id", if a.id.is_empty() { "all".to_string() } else { a.id.join(";") }),
                ("p", join(&a.p)),
                ("reps", a.reps.to_string()),
                ("seed", a.seed.to_string()),
            ];
            let rows = wishart_rows(&a)?;
            emit(&out, &header("wishart-check", &kv), |w| {
                w.write_record(["id", "p", "reps", "max_abs_z"])?;
                for r in rows {
                    w.write_record([r.id.to_string(), r.p.to_string(), r.reps.to_string(), f(r.max_abs_z)])?;
                }
                Ok(())
            })
        }
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code: 0 on success, 1 for invalid input, 2 for
/// numerical failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
