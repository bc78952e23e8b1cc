use thiserror::Error;

use crate::types::{ProductId, SetId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("component `{0}` is already registered with different content")]
    DuplicateIdConflict(String),
    #[error("invalid description `{id}`: {reason}")]
    InvalidDescription { id: String, reason: String },
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
    #[error("no catalog entry for product `{product}` version `{version}`")]
    MissingCatalogEntry { product: ProductId, version: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("change sets `{0}` and `{1}` of one request share target resource `{2}`")]
    OverlappingChangeSets(SetId, SetId, String),
    #[error("unknown change set `{0}`")]
    UnknownChangeSet(SetId),
    #[error("change set `{0}` is already completed and cannot be undone")]
    AlreadyCompleted(SetId),
    #[error("inconsistent configuration: {0}")]
    InconsistentConfig(String),
    #[error("cannot compute a budget for an empty batch")]
    EmptyBatch,
    #[error("new-side configuration is not ready for VM migration")]
    NewSideNotReady,
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("unknown tenant `{0}`")]
    UnknownTenant(String),
    #[error("unknown host `{0}`")]
    UnknownHost(String),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid flags: {0}")]
    InvalidFlags(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
