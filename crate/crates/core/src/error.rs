use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite component in row {row} (image_id {image_id})")]
    NonFinite { row: usize, image_id: u64 },

    #[error("duplicate image_id {0}")]
    DuplicateImage(u64),

    #[error("product {product_id} mapped to TLC {first} and TLC {second}")]
    Hierarchy {
        product_id: u64,
        first: u32,
        second: u32,
    },

    #[error(
        "catalog/embedding mismatch: missing embeddings for {missing_embeddings:?}, \
         missing catalog records for {missing_catalog:?}"
    )]
    Mismatch {
        missing_embeddings: Vec<u64>,
        missing_catalog: Vec<u64>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training needs at least two distinct labels")]
    DegenerateTraining,

    #[error("label {0} is not a router class")]
    UnknownLabel(u32),

    #[error("router does not cover catalog TLCs {0:?}")]
    Coverage(Vec<u32>),

    #[error("ground truth error: {0}")]
    GroundTruth(String),

    #[error("reports are not comparable: {0}")]
    Incomparable(String),
}
