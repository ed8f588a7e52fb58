use cama_core::CamaError;

/// Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CamaError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(e) => match e {
                CamaError::InvalidConfig(_)
                | CamaError::InvalidDims(_)
                | CamaError::InvalidSpec(_)
                | CamaError::InvalidPercentage(_)
                | CamaError::DimsMismatch(_)
                | CamaError::PlanLayerOutOfRange { .. }
                | CamaError::PositionOutOfRange { .. }
                | CamaError::ZeroSteps => 1,
                _ => 2,
            },
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
