use bayescan::train::TrainError;
use std::path::Path;
use std::process::ExitCode;
use thiserror::Error;

/// Failure classes and their exit codes: usage 2, data 3, numerical 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn data(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerical { epoch, batch, .. } => {
                CliError::Numerical(format!("non-finite loss at epoch {epoch}, batch {batch}"))
            }
            TrainError::ConfigInvalid(m) => CliError::Usage(m),
            TrainError::Uncertainty(bayescan::uncertainty::UncertaintyError::ModeMismatch) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;
    use bayescan::model::InitConfig;
    use bayescan::uncertainty::UncertaintyError;
    use bayescan::variational::PriorSpec;
    use bayescan::{Mode, ModelSpec, ModelState};

    #[test]
    fn train_errors_map_to_exit_codes() {
        let state = ModelState::init(
            ModelSpec::default_for(4, Mode::Deterministic),
            &InitConfig::default(),
            PriorSpec::default(),
            1,
        )
        .unwrap();
        let numerical = TrainError::Numerical {
            epoch: 3,
            batch: 7,
            last_good: Box::new(state),
            metrics: Vec::new(),
        };
        assert_eq!(CliError::from(numerical).code(), 4);
        assert_eq!(CliError::from(TrainError::ConfigInvalid("x".into())).code(), 2);
        let guard = CliError::from(TrainError::Uncertainty(UncertaintyError::ModeMismatch));
        assert_eq!(
            (guard.code(), guard.to_string().as_str()),
            (2, "MC requires Bayesian mode")
        );
        assert_eq!(CliError::from(TrainError::EmptyInput).code(), 3);
        assert_eq!(CliError::from(TrainError::Format("bad".into())).code(), 3);
    }
}
