use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants fall into two families: validation errors (bad arguments or
/// configurations, detected before any numerical work) and numerical failures
/// (solvers, quadrature, singular systems). [`Error::is_numerical`] tells them
/// apart; the CLI maps them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("{rows} rows cannot be split evenly across {machines} machines")]
    Divisibility { rows: usize, machines: usize },

    #[error("derivative of order {order} is not available for the {loss} loss")]
    UnsupportedDerivative { loss: &'static str, order: usize },

    #[error("the {loss} loss is not differentiable at t = {t}")]
    NonDifferentiable { loss: &'static str, t: f64 },

    #[error("proximal Newton iteration did not converge (c = {c}, z = {z})")]
    ProxNonConvergence { c: f64, z: f64 },

    #[error("Hessian is numerically singular")]
    SingularHessian,

    #[error("design is rank deficient ({rows} rows, {cols} columns)")]
    RankDeficient { rows: usize, cols: usize },

    #[error("machine {machine}: {source}")]
    Machine {
        machine: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {rep}: {source}")]
    Replication {
        rep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite integrand value at {at}")]
    NonFiniteIntegrand { at: f64 },

    #[error("adaptive quadrature exhausted its budget (estimated error {estimate:e})")]
    QuadratureBudget { estimate: f64 },

    #[error(
        "residual equations did not converge at kappa = {kappa} after {iterations} iterations \
         (last residual {last:e})"
    )]
    SolverFailure {
        kappa: f64,
        iterations: usize,
        residual_trace: Vec<f64>,
        last: f64,
    },

    #[error("degenerate loss: A2 = {0} must be positive")]
    DegenerateLoss(f64),

    #[error("kappa = {0} lies outside (0, 1)")]
    InfeasibleRegime(f64),

    #[error("no machine count satisfies the bound {bound:e} (predicted error at m = 1 is {error_at_one:e})")]
    Infeasible { bound: f64, error_at_one: f64 },

    #[error("{0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of numerical routines, false for validation errors.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::ProxNonConvergence { .. }
            | Error::SingularHessian
            | Error::RankDeficient { .. }
            | Error::NonFiniteIntegrand { .. }
            | Error::QuadratureBudget { .. }
            | Error::SolverFailure { .. }
            | Error::DegenerateLoss(_)
            | Error::Infeasible { .. } => true,
            Error::Machine { source, .. } | Error::Replication { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
