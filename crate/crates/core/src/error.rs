use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// The mean is undefined because some trajectories never reached the target.
    #[error("{n_censored} censored trajectories; mean first-passage time is undefined")]
    CensoredBaseline { n_censored: usize },

    #[error("P = {p} exceeds the horizon {horizon}")]
    OutOfHorizon { p: usize, horizon: usize },

    #[error("no surviving trajectories at epoch {epoch}")]
    EmptyConditional { epoch: usize },

    #[error("perturbation {perturbation} cannot act on process {process}: no parameter vector")]
    IncompatiblePerturbation {
        perturbation: String,
        process: String,
    },

    #[error("process does not absorb: {0}")]
    NonAbsorbing(String),

    #[error("perturbed MFPT did not converge within {t_max} epochs (remaining mass {residual_mass:e}, tail bound {tail_bound:e})")]
    Truncation {
        t_max: usize,
        residual_mass: f64,
        tail_bound: f64,
    },

    #[error("invalid comparison: {0}")]
    InvalidComparison(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }
}
