//! The 30-slot feature encoding and the word-count analysis behind its
//! text feature.
//!
//! Exclusive questions become one integer code each; multi questions become
//! one binary per option. The word feature is a binary "more words than the
//! threshold".

mod stats;
mod vector;
mod words;

pub use stats::{
    kolmogorov_survival, ks_two_sample, select_threshold, write_cdf_csv, CdfPoint, KsResult,
    ThresholdAnalysis,
};
pub use vector::{
    read_vectors_csv, slot_index, vectorize, write_vectors_csv, FeatureVector, SlotDef, SlotKind,
    FEATURE_NAMES, FEATURE_SCHEMA, N_FEATURES,
};
pub use words::{
    count_words, extract_all, extract_word_count, read_word_counts_csv, write_word_counts_csv,
    OcrAdapter, WordCount, WordCountRow, WordSource,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("text extraction failed for `{image_id}`: {reason}")]
    AdapterFailure { image_id: String, reason: String },
    #[error("image file not found: {}", .0.display())]
    ImageMissing(PathBuf),
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    InvalidSample,
    #[error("no word counts for the {0} class")]
    EmptyClass(&'static str),
    #[error("labels are incomplete: no answer for `{0}`")]
    IncompleteLabels(String),
    #[error("unknown feature key `{0}`")]
    UnknownFeatureKey(String),
    #[error("labels are inconsistent: {0}")]
    InconsistentLabels(String),
    #[error("threshold must be at least 1, got {0}")]
    InvalidThreshold(u32),
    #[error("malformed vector file: {0}")]
    MalformedVectors(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
