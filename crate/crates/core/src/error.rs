use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing modality {0}")]
    MissingModality(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate intensity in modality {0}: zero variance over brain voxels")]
    DegenerateIntensity(String),

    #[error("cannot crop {discard} axial slices from a volume of depth {depth}")]
    EmptyCrop { depth: usize, discard: usize },

    #[error("insufficient subjects: {0}")]
    InsufficientSubjects(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside [1, {max}]")]
    InvalidTimestep { t: usize, max: usize },

    #[error("timestep {0} has a zero cumulative signal coefficient")]
    DegenerateTimestep(usize),

    #[error("sampling steps {steps} outside [1, {max}]")]
    InvalidSteps { steps: usize, max: usize },

    #[error("value out of range: {0}")]
    RangeViolation(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("alignment error: {0}")]
    AlignmentError(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    RefusingOverwrite(PathBuf),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingModality(_) => "MissingModality",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DegenerateIntensity(_) => "DegenerateIntensity",
            Error::EmptyCrop { .. } => "EmptyCrop",
            Error::InsufficientSubjects(_) => "InsufficientSubjects",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::InvalidTimestep { .. } => "InvalidTimestep",
            Error::DegenerateTimestep(_) => "DegenerateTimestep",
            Error::InvalidSteps { .. } => "InvalidSteps",
            Error::RangeViolation(_) => "RangeViolation",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::InvalidThreshold(_) => "InvalidThreshold",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::AlignmentError(_) => "AlignmentError",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::RefusingOverwrite(_) => "RefusingOverwrite",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::Precondition(_) => "Precondition",
            Error::Format(_) => "Format",
            Error::Subject { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Nifti(_) => "Nifti",
            Error::Tensor(_) => "Tensor",
            Error::Json(_) => "Json",
            Error::TomlDe(_) | Error::TomlSer(_) => "Config",
            Error::Image(_) => "Image",
            Error::Csv(_) => "Csv",
        }
    }

    pub fn for_subject(self, subject: impl Into<String>) -> Error {
        Error::Subject {
            subject: subject.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn shape(what: impl std::fmt::Display) -> Error {
        Error::ShapeMismatch(what.to_string())
    }
}
