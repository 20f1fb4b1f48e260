//! Errors carrying the process exit code.

use std::fmt;
use xablate::analyze::AnalyzeError;
use xablate::corpus::CorpusError;
use xablate::diagnose::DiagnoseError;
use xablate::model::ModelError;
use xablate::synth::SynthError;
use xablate::train::TrainError;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_OTHER,
            msg: msg.into(),
        }
    }

    pub fn incompatible(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_INCOMPATIBLE,
            msg: msg.into(),
        }
    }

    /// Prefixes the message with what was being attempted.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.msg = format!("{what}: {}", self.msg);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::other(e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::other(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::other(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ShapeMismatch { .. } | ModelError::MissingParameter(_) => Failure::incompatible(e.to_string()),
            _ => Failure::other(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Failure {
                code: EXIT_DIVERGENCE,
                msg: e.to_string(),
            },
            TrainError::Incompatible(_) => Failure::incompatible(e.to_string()),
            TrainError::Config(_) => Failure::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => Failure::other(e.to_string()),
        }
    }
}

impl From<DiagnoseError> for Failure {
    fn from(e: DiagnoseError) -> Self {
        match e {
            DiagnoseError::Incompatible(_) => Failure::incompatible(e.to_string()),
            _ => Failure::other(e.to_string()),
        }
    }
}

impl From<AnalyzeError> for Failure {
    fn from(e: AnalyzeError) -> Self {
        Failure::other(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let div = TrainError::Divergence {
            step: 3,
            msg: "nan".into(),
        };
        assert_eq!(Failure::from(div).code, EXIT_DIVERGENCE);
        assert_eq!(
            Failure::from(DiagnoseError::Incompatible("V".into())).code,
            EXIT_INCOMPATIBLE
        );
        let shape = ModelError::ShapeMismatch {
            name: "w".into(),
            expected: (1, 2),
            found: (2, 1),
        };
        assert_eq!(Failure::from(TrainError::Model(shape)).code, EXIT_INCOMPATIBLE);
        assert_eq!(Failure::from(TrainError::Config("lr".into())).code, EXIT_USAGE);
        assert_eq!(Failure::from(CorpusError::NoGoldLabels).code, EXIT_OTHER);
    }
}
