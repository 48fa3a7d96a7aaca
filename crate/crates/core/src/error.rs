use thiserror::Error;

use crate::emodel::DesignParams;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible design {0}")]
    Infeasible(DesignParams),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid target spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("convex hull is degenerate: {0}")]
    DegenerateHull(String),
    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Diverged { epoch: usize, what: String },
    #[error("search objective became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error(transparent)]
    Diff(#[from] diffcore::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for problems with the caller's inputs (arguments, config,
    /// files, prerequisites) as opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Infeasible(_)
                | Error::Invalid(_)
                | Error::InvalidSpec(_)
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Missing(_)
        )
    }
}
