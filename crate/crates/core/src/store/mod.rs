//! Datasets and persistence.
//!
//! Problem files are validated field by field (errors name the line and the
//! field) and keep unknown fields on round trip. Curation dedups, fills
//! missing severities and adds open-ended variants of multiple-choice
//! questions. Run outputs go to append-only JSON Lines sinks inside a run
//! directory, and whole periods can be sealed into checksummed archives.

mod archive;
mod curate;
mod problem;
mod records;
mod sink;

use std::path::Path;

use thiserror::Error;

pub use archive::{
    archive_path, archive_period, list_archives, load_archive, ArchiveEntry, ArchiveManifest,
    ArchivedPeriod, ARCHIVE_DIR,
};
pub use curate::{
    break_dataset, curate, parse_choice_options, query_key, strip_choice_list, CurationNote,
    CurationReport, SplitSpec, OPEN_VARIANT_SUFFIX,
};
pub use problem::{input_digest, load_problems, parse_problems, write_problems, Problem, Split};
pub use records::{DSftRecord, DTempRecord, RunRecord, RECORD_VERSION};
pub use sink::{read_jsonl, JsonlSink, RunStore, DSFT_FILE, DTEMP_FILE, EVENTS_FILE, RUNS_FILE};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: field {field}: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("period {0:?} is already archived")]
    PeriodExists(String),
    #[error("no archive for period {0:?}")]
    UnknownPeriod(String),
    #[error("nothing in the run store is tagged with period {0:?}")]
    NothingToArchive(String),
    #[error("invalid period label {0:?}")]
    InvalidLabel(String),
    #[error("archive {period:?} is corrupt: checksum mismatch on {file}")]
    ArchiveCorrupt { period: String, file: String },
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("graph file: {0}")]
    Graph(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
