use heatlab_core::HeatError;
use thiserror::Error;

use crate::expr::ExprError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error: {0}")]
    Expr(#[from] ExprError),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{0}")]
    Heat(#[from] HeatError),

    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    /// 2 for bad input, 3 for numerical failure, 4 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Expr(_) | CliError::Io { .. } => 2,
            CliError::Heat(e) if e.is_numerical() => 3,
            CliError::Heat(_) => 2,
            CliError::ChecksFailed { .. } => 4,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }
}
