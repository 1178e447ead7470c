//! JSON Lines helpers shared by the manifest, chunk store, trial log and
//! embedding cache formats.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

/// Writes `rows` to `path`, one compact JSON value per line.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for row in rows {
        write_row(&mut out, row).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_row<W: Write, T: Serialize>(out: &mut W, row: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *out, row).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

/// Reads every non-blank line of `path` as a raw JSON value, keeping line
/// numbers for error reporting.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

pub fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T, JsonlError> {
    serde_json::from_str(line).map_err(|source| JsonlError::Parse {
        path: path.display().to_string(),
        line: line_no,
        source,
    })
}

/// Reads `path` as homogeneous rows.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| parse_line(path, n, &line))
        .collect()
}
