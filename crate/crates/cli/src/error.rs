use std::fmt;

use tagbert::model::ModelError;
use tagbert::numerics::NumericsError;
use tagbert::querydata::QueryDataError;
use tagbert::taggraph::TagGraphError;
use tagbert::traineval::TrainEvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numeric => 3,
        }
    }

    /// Prefixes the message with the stage that failed.
    pub fn at(mut self, stage: impl fmt::Display) -> Self {
        self.message = format!("{stage}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<QueryDataError> for CliError {
    fn from(e: QueryDataError) -> Self {
        match e {
            QueryDataError::InvalidConfig(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<TagGraphError> for CliError {
    fn from(e: TagGraphError) -> Self {
        match e {
            TagGraphError::ZeroSupport | TagGraphError::BadFraction(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Numerics(NumericsError::NonFinite { .. }) => Kind::Numeric,
            ModelError::Config(_) => Kind::Usage,
            _ => Kind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<TrainEvalError> for CliError {
    fn from(e: TrainEvalError) -> Self {
        match e {
            TrainEvalError::Diverged { .. } => Self {
                kind: Kind::Numeric,
                message: e.to_string(),
            },
            TrainEvalError::InvalidConfig(_) => Self::usage(e.to_string()),
            TrainEvalError::Model(m) => m.into(),
            TrainEvalError::Data(d) => d.into(),
            _ => Self::data(e.to_string()),
        }
    }
}
