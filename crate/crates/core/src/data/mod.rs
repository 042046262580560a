//! Dataset records, file loaders, NLI triple mining, deletion noise and
//! batching.

mod batch;
pub mod io;
mod nli;
mod noise;
mod records;

use std::path::Path;

use thiserror::Error;

pub use batch::make_batches;
pub use io::{
    load_ir_data, load_nli_pairs, load_scored_pairs, load_sentences, load_triples, write_ir_data,
    write_nli_pairs, write_scored_pairs, write_sentences, write_triples,
};
pub use nli::nli_to_triples;
pub use noise::delete_noise;
pub use records::{LabeledPair, NliLabel, QrelSet, ScoreRange, ScoredPair, Triple};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: score {score} outside declared range [{min}, {max}]")]
    ScoreOutOfRange {
        path: String,
        line: usize,
        score: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid score range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },
    #[error("qrels reference unknown {kind} id {id:?}")]
    DanglingId { kind: &'static str, id: String },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, message: String) -> Self {
        Self::Parse {
            path: path.display().to_string(),
            line,
            message,
        }
    }
}
