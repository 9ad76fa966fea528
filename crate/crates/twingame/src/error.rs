use crate::bvp::BvpSolution;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// (bad scenario files, invalid parameters) exit with code 2, solver
/// failures with 3, and I/O failures with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {msg}")]
    ScenarioParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("scenario validation: {0}")]
    ScenarioInvalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integration failure at t = {t:.6}: {msg}")]
    Integration { t: f64, msg: String },

    #[error("step size underflow at t = {t:.6} (h = {h:.3e}); problem too stiff for the explicit integrator")]
    Stiffness { t: f64, h: f64 },

    #[error("Newton iteration stagnated after {iterations} iterations (best residual {best_residual:.3e})")]
    NewtonStagnated {
        iterations: usize,
        best_residual: f64,
        /// Best iterate seen before giving up.
        best: Box<BvpSolution>,
    },

    #[error("singular Jacobian in the Newton solve (condition estimate {cond:.3e})")]
    SingularJacobian { cond: f64 },

    #[error("unbounded control for VSP {vsp}: the demand-mismatch weight w4 must be positive")]
    UnboundedControl { vsp: usize },

    #[error("fixed-point iteration did not converge after {rounds} rounds (last change {delta:.3e})")]
    FixedPointDiverged { rounds: usize, delta: f64 },

    #[error("state constraint violated: {0}")]
    ConstraintViolated(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code category used by the CLI: 2 config, 3 solver, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::ScenarioParse { .. }
            | Error::ScenarioInvalid(_)
            | Error::Unsupported(_)
            | Error::UnboundedControl { .. } => 2,
            Error::Integration { .. }
            | Error::Stiffness { .. }
            | Error::NewtonStagnated { .. }
            | Error::SingularJacobian { .. }
            | Error::FixedPointDiverged { .. }
            | Error::ConstraintViolated(_) => 3,
            Error::Io { .. } => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
