use std::fmt;

use fpt_perturb::Error;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
    Statistical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
            Failure::Statistical(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("usage", m),
            Failure::Validation(m) => ("invalid input", m),
            Failure::Runtime(m) => ("runtime", m),
            Failure::Statistical(m) => ("statistical precondition", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::CensoredBaseline { .. } | Error::EmptyConditional { .. } => Failure::Statistical(msg),
            Error::Truncation { .. } => Failure::Runtime(msg),
            Error::InvalidData(_)
            | Error::OutOfHorizon { .. }
            | Error::IncompatiblePerturbation { .. }
            | Error::NonAbsorbing(_)
            | Error::InvalidComparison(_) => Failure::Validation(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Failure::Runtime(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Attaches a path to IO errors.
pub fn io_at<T>(path: &std::path::Path, r: std::io::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
