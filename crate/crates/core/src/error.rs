use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("taxonomy has no classes")]
    EmptyTaxonomy,
    #[error("taxonomy has {0} classes, at most {max} are supported", max = crate::taxonomy::ClassTaxonomy::MAX_CLASSES)]
    TooManyClasses(usize),
    #[error("duplicate class abbreviation `{0}`")]
    DuplicateAbbreviation(String),
    #[error("class abbreviation must be non-empty")]
    EmptyAbbreviation,
    #[error("label `{0}` is not part of the taxonomy")]
    UnknownLabel(String),
    #[error("duplicate record id `{0}`")]
    DuplicateRecordId(String),
    #[error("augmented record `{id}` must reference an original parent record (got {parent:?})")]
    InvalidParent { id: String, parent: Option<String> },
    #[error("per-class counts do not match the records: {0}")]
    CountMismatch(String),
    #[error("taxonomy version mismatch: expected `{expected}`, found `{found}`")]
    TaxonomyMismatch { expected: String, found: String },
    #[error("number of folds must be at least 1")]
    InvalidFoldCount,
    #[error("class `{class}` has {available} original images, fewer than the {n_folds} folds requested")]
    TooFewForFolds {
        class: String,
        available: usize,
        n_folds: usize,
    },
    #[error("fold index {fold} out of range for {n_folds} folds")]
    FoldOutOfRange { fold: usize, n_folds: usize },
    #[error("record `{0}` has no fold assignment")]
    MissingFold(String),
    #[error("no records to balance")]
    EmptyInput,
    #[error("class `{0}` has no training records")]
    EmptyClass(String),
    #[error("balancing input must only contain original records, `{0}` is augmented")]
    AugmentedInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected 3 colour channels, got {0}")]
    ChannelCount(usize),
    #[error("image has no pixels")]
    EmptyImage,
    #[error("raster buffer has {got} bytes, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("probability vector has {got} entries, expected {expected}")]
    ProbabilityLength { expected: usize, got: usize },
    #[error("probabilities sum to {0}, expected 1")]
    ProbabilitySum(f64),
    #[error("top-k accuracy needs at least one prediction")]
    EmptyPredictions,
    #[error("k = {k} is outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("no metrics reports to aggregate")]
    NoReports,
}
