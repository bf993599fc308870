//! Versioned readers and writers for every file the tools produce.
//!
//! | file            | module          | magic / marker        | version |
//! |-----------------|-----------------|-----------------------|---------|
//! | checkpoint      | [`checkpoint`]  | `EGSPOCKP` (8 bytes)  | 1       |
//! | RunLog JSONL    | [`runlog`]      | `"v"` key per line    | 1       |
//! | rollout dump    | [`dump`]        | `"v"` key per line    | 1       |
//! | config TOML     | [`config`]      | `format_version` key  | 1       |
//! | dataset JSONL   | [`dataset`]     | `"v"` key per line    | 1       |

use std::io;
use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod export;
pub mod runlog;

/// Why a file could not be read or written.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a {format} file (bad magic)")]
    Magic { format: &'static str },
    #[error("{format} version {found} is newer than the supported version {supported}")]
    Version {
        format: &'static str,
        found: u64,
        supported: u64,
    },
    #[error("{format} is truncated: {detail}")]
    Truncated { format: &'static str, detail: String },
    #[error("{format} checksum mismatch")]
    Checksum { format: &'static str },
    #[error("{format} schema error{}: {detail}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Schema {
        format: &'static str,
        line: Option<usize>,
        detail: String,
    },
}

impl FormatError {
    /// Stable short name of the error category.
    pub fn category(&self) -> &'static str {
        match self {
            FormatError::Io { .. } => "io",
            FormatError::Magic { .. } => "magic",
            FormatError::Version { .. } => "version",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Checksum { .. } => "checksum",
            FormatError::Schema { .. } => "schema",
        }
    }

    /// 1-based line of a line-oriented format, when known.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::Schema { line, .. } => *line,
            _ => None,
        }
    }

    pub(crate) fn schema(format: &'static str, line: Option<usize>, detail: impl Into<String>) -> Self {
        FormatError::Schema {
            format,
            line,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads the `"v"` key of a JSONL record; absent means version 1.
pub(crate) fn check_line_version(
    format: &'static str,
    line: usize,
    obj: &serde_json::Map<String, serde_json::Value>,
    supported: u64,
) -> Result<()> {
    match obj.get("v") {
        None => Ok(()),
        Some(v) => match v.as_u64() {
            Some(found) if found <= supported => Ok(()),
            Some(found) => Err(FormatError::Version {
                format,
                found,
                supported,
            }),
            None => Err(FormatError::schema(
                format,
                Some(line),
                "\"v\" must be a non-negative integer",
            )),
        },
    }
}
