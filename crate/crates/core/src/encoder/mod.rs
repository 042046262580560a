//! Word-level tokenizer, the siamese transformer encoder, pooling, and the
//! model file format.

pub mod format;
mod model;
mod vocab;

use std::path::Path;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use format::{load, save, ModelMeta};
pub use model::{pool, BoundParams, EncoderConfig, EncoderModel, ParamStore, Pooling};
pub use vocab::{tokenize, words, TokenId, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("mask length {mask} does not match {ids} token ids")]
    MaskLength { ids: usize, mask: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("every position is masked; nothing to pool")]
    AllMasked,
    #[error("not a model file: missing SRFM1 magic")]
    BadMagic,
    #[error("model file is truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl EncoderError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
