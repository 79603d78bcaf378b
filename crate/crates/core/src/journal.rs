//! Append-only JSON-lines log with atomic compaction.
//!
//! Every record is one line. A record counts as committed once `append`
//! returns. A final line without its newline is the trace of an
//! interrupted write; it is discarded (and cut from the file) on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
    sync: bool,
    records: Mutex<usize>,
}

impl Journal {
    /// Opens (creating if needed) the log at `path` and returns its
    /// records. With `sync`, every append is followed by `fdatasync`.
    pub fn open<T: DeserializeOwned>(path: &Path, sync: bool) -> Result<(Journal, Vec<T>), JournalError> {
        let io_err = |source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(e)),
        };
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let mut records = Vec::new();
        for (i, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rec = serde_json::from_slice(line).map_err(|e| JournalError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        if complete < bytes.len() {
            warn!(
                "{}: dropping {} bytes of an interrupted write",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64).map_err(io_err)?;
        }
        let count = records.len();
        Ok((
            Journal {
                path: path.to_path_buf(),
                file: Mutex::new(file),
                sync,
                records: Mutex::new(count),
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Number of records currently in the file.
    pub fn len(&self) -> usize {
        *self.records.lock()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn io(&self, source: io::Error) -> JournalError {
        JournalError::Io {
            path: self.path.clone(),
            source,
        }
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), JournalError> {
        self.append_all(std::slice::from_ref(record))
    }

    /// Appends several records with a single write.
    pub fn append_all<T: Serialize>(&self, records: &[T]) -> Result<(), JournalError> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("journal records serialize");
            buf.push(b'\n');
        }
        let mut file = self.file.lock();
        file.write_all(&buf).map_err(|e| self.io(e))?;
        file.flush().map_err(|e| self.io(e))?;
        if self.sync {
            file.sync_data().map_err(|e| self.io(e))?;
        }
        *self.records.lock() += records.len();
        Ok(())
    }

    /// Replaces the whole log with `records` (write to a temporary file,
    /// then rename over the original).
    pub fn compact<T: Serialize>(&self, records: &[T]) -> Result<(), JournalError> {
        let mut file = self.file.lock();
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut out = io::BufWriter::new(File::create(&tmp).map_err(|e| self.io(e))?);
            for r in records {
                serde_json::to_writer(&mut out, r).expect("journal records serialize");
                out.write_all(b"\n").map_err(|e| self.io(e))?;
            }
            let inner = out.into_inner().map_err(|e| self.io(e.into_error()))?;
            inner.sync_all().map_err(|e| self.io(e))?;
        }
        fs::rename(&tmp, &self.path).map_err(|e| self.io(e))?;
        *file = OpenOptions::new().append(true).open(&self.path).map_err(|e| self.io(e))?;
        *self.records.lock() = records.len();
        Ok(())
    }
}
