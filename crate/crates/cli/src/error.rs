use std::fmt;

use timepfn::config::ConfigError;
use timepfn::dataset_store::StoreError;
use timepfn::lmc_synth::LmcError;
use timepfn::model::ModelError;
use timepfn::train_eval::TrainError;

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Usage,
    Parse,
    Shape,
    Io,
    Diverged,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 1,
            Kind::Usage => 2,
            Kind::Parse => 3,
            Kind::Shape => 4,
            Kind::Io => 5,
            Kind::Diverged => 6,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::new(Kind::Io, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::Read(_) => Kind::Io,
            _ => Kind::Config,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let kind = match e {
            StoreError::Io { .. } => Kind::Io,
            StoreError::ShapeMismatch { .. } | StoreError::WindowTooLong { .. } => Kind::Shape,
            StoreError::BadMagic(_)
            | StoreError::UnsupportedVersion(_)
            | StoreError::Truncated { .. }
            | StoreError::InvalidMode { .. } => Kind::Parse,
            StoreError::ZeroStep => Kind::Config,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::InvalidConfig(_) => Kind::Config,
            ModelError::ShapeMismatch(_) | ModelError::Autodiff(_) => Kind::Shape,
            ModelError::NonFinite | ModelError::Checkpoint(_) => Kind::Parse,
            ModelError::Io { .. } => Kind::Io,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Model(m) => return m.into(),
            TrainError::Store(s) => return s.into(),
            TrainError::InvalidConfig(_) | TrainError::EmptyBudget => Kind::Config,
            TrainError::DivergedLoss { .. } => Kind::Diverged,
            TrainError::ContextTooShort { .. } | TrainError::NoWindows(_) => Kind::Shape,
            TrainError::Io { .. } => Kind::Io,
            TrainError::ParseError { .. } | TrainError::NonNumericCell { .. } => Kind::Parse,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<LmcError> for CliError {
    fn from(e: LmcError) -> Self {
        Self::new(Kind::Config, e.to_string())
    }
}
