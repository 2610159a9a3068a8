//! Experiment plumbing: manifests and split protocols, metrics, annotation
//! agreement, a synthetic event corpus, and the end-to-end experiment runner.

mod experiment;
mod manifest;
mod metrics;
mod synth;

pub use experiment::*;
pub use manifest::*;
pub use metrics::*;
pub use synth::*;

use thiserror::Error;

use crate::audio_prep::AudioError;
use crate::elm::ElmError;
use crate::features::FeatureError;
use crate::ladder::LadderError;
use crate::normalize::NormError;
use crate::svm::SvmError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("class {class:?} has {count} examples, need at least {needed}")]
    TooFewExamples { class: String, count: usize, needed: usize },
    #[error("invalid split specification: {0}")]
    SplitSpec(String),
    #[error("no predictions to evaluate")]
    EmptyEvaluation,
    #[error("{predictions} predictions for {truth} ground-truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("annotation record {clip_id:?} has {count} judge labels, expected 3")]
    JudgeCount { clip_id: String, count: usize },
    #[error("no annotation records")]
    NoRecords,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("clip {clip_id:?}: {source}")]
    Clip {
        clip_id: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("no embedding for clip {0:?}")]
    MissingEmbedding(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Ladder(#[from] LadderError),
    #[error(transparent)]
    Elm(#[from] ElmError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// True for errors caused by invalid user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Manifest(_)
            | HarnessError::TooFewExamples { .. }
            | HarnessError::SplitSpec(_)
            | HarnessError::EmptyEvaluation
            | HarnessError::LengthMismatch { .. }
            | HarnessError::LabelOutOfRange { .. }
            | HarnessError::JudgeCount { .. }
            | HarnessError::NoRecords
            | HarnessError::Config(_)
            | HarnessError::MissingEmbedding(_) => true,
            HarnessError::Clip { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
