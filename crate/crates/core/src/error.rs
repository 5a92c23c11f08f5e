use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Basis,
    Forward,
    Noise,
    Assembly,
    Qrm,
    Recover,
    PostProcess,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Basis => "basis",
            Stage::Forward => "forward",
            Stage::Noise => "noise",
            Stage::Assembly => "assembly",
            Stage::Qrm => "qrm",
            Stage::Recover => "recover",
            Stage::PostProcess => "post-process",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("basis construction failed: {0}")]
    Basis(String),

    #[error("{what} did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("operator is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 config, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Domain(_) | Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::Basis(_) | Error::NonConvergence { .. } | Error::NotPositiveDefinite(_) => 3,
            Error::Io(_) => 4,
            Error::Stage { .. } => unreachable!(),
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
