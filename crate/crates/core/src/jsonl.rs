//! Line-delimited JSON records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl JsonlError {
    /// 1-based line number of a parse failure.
    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Parse { line, .. } => Some(*line),
            JsonlError::Io { .. } => None,
        }
    }
}

/// Reads every non-blank line of `path` as a `T`.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let shown = path.display().to_string();
    let io = |source| JsonlError::Io { path: shown.clone(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io { path: shown.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: shown.clone(),
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write<'a, T, I>(path: &Path, records: I) -> Result<usize, JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let shown = path.display().to_string();
    let io = |source| JsonlError::Io { path: shown.clone(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut n = 0;
    for record in records {
        serde_json::to_writer(&mut w, record).map_err(|source| JsonlError::Parse {
            path: shown.clone(),
            line: n + 1,
            source,
        })?;
        w.write_all(b"\n").map_err(io)?;
        n += 1;
    }
    w.flush().map_err(io)?;
    Ok(n)
}
