use std::fmt;
use std::path::Path;

use knobtune::env::EnvError;
use knobtune::extract::{ExtractError, LlmError};
use knobtune::hints::HintError;
use knobtune::trainer::TrainError;
use knobtune::tuning::TuneError;

/// Process exit status by error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage = 2,
    Io = 3,
    Config = 4,
    Evaluation = 5,
    Training = 6,
    Llm = 7,
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::new(Category::Io, format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.category as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        let category = match &e {
            EnvError::Setup(_) | EnvError::Catalog(_) | EnvError::InvalidConfig(_) => Category::Config,
            EnvError::Io(_) => Category::Io,
            _ => Category::Evaluation,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Env(e) => e.into(),
            TrainError::Io(e) => CliError::new(Category::Io, e.to_string()),
            TrainError::NonPositiveBaseline(_) => CliError::new(Category::Evaluation, e.to_string()),
            TrainError::Config(_) | TrainError::Catalog(_) | TrainError::Hint(_) | TrainError::Checkpoint(_) => {
                CliError::new(Category::Config, e.to_string())
            }
            TrainError::Agent(_) | TrainError::Replay(_) => CliError::new(Category::Training, e.to_string()),
        }
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Train(e) => e.into(),
            TuneError::Io(e) => CliError::new(Category::Io, e.to_string()),
            TuneError::ZeroBudget => CliError::new(Category::Usage, e.to_string()),
            TuneError::EmptyPool(_) | TuneError::Entry { .. } => CliError::new(Category::Config, e.to_string()),
        }
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        let category = match &e {
            ExtractError::Io(..) => Category::Io,
            _ => Category::Config,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        CliError::new(Category::Llm, e.to_string())
    }
}

impl From<HintError> for CliError {
    fn from(e: HintError) -> Self {
        CliError::new(Category::Config, e.to_string())
    }
}
