use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{TrialRecord, RECORD_SCHEMA_VERSION};

/// Newline-delimited JSON trial records. A key that appears more than once
/// resolves to its last line.
#[derive(Debug, Default)]
pub struct RecordStore {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<TrialRecord>,
    index: HashMap<String, usize>,
}

fn parse_records(bytes: &[u8], what: &str) -> Result<(Vec<TrialRecord>, usize)> {
    let mut records = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let end = bytes[offset..].iter().position(|b| *b == b'\n').map(|p| offset + p);
        let line = &bytes[offset..end.unwrap_or(bytes.len())];
        if !line.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice::<TrialRecord>(line) {
                Ok(r) if r.schema_version != RECORD_SCHEMA_VERSION => {
                    return Err(Error::format(
                        what,
                        offset as u64,
                        format!("schema version {} (expected {RECORD_SCHEMA_VERSION})", r.schema_version),
                    ));
                }
                Ok(r) => records.push(r),
                // an unterminated final line is a torn append
                Err(e) if end.is_none() => {
                    log::warn!("{what}: dropping incomplete trailing record at byte {offset}: {e}");
                    return Ok((records, offset));
                }
                Err(e) => return Err(Error::format(what, offset as u64, e.to_string())),
            }
        }
        offset = end.map_or(bytes.len(), |e| e + 1);
    }
    Ok((records, bytes.len()))
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_records(&bytes, &path.display().to_string())?.0)
}

pub fn write_records(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending, loading any records already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self::default();
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let (records, valid) = parse_records(&bytes, &path.display().to_string())?;
            if valid < bytes.len() {
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                f.set_len(valid as u64).map_err(|e| Error::io(path, e))?;
            }
            for r in records {
                store.insert(r);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.path = Some(path.to_path_buf());
        store.file = Some(file);
        Ok(store)
    }

    /// Starts an empty store at `path`, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::write(path, b"").map_err(|e| Error::io(path, e))?;
        Self::open(path)
    }

    fn insert(&mut self, record: TrialRecord) {
        match self.index.get(&record.key()) {
            Some(&i) => self.records[i] = record,
            None => {
                self.index.insert(record.key(), self.records.len());
                self.records.push(record);
            }
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<&TrialRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Writes one line and flushes before updating the in-memory view.
    pub fn append(&mut self, record: &TrialRecord) -> Result<()> {
        if let Some(file) = self.file.as_mut() {
            let mut line = serde_json::to_vec(record)?;
            line.push(b'\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(&line).map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.insert(record.clone());
        Ok(())
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_middle_line_reports_offset() {
        let err = parse_records(b"\n{not json}\n{}\n", "records").unwrap_err();
        assert!(err.to_string().contains("byte 1"), "{err}");
    }

    #[test]
    fn torn_final_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, b"{\"schema_vers").unwrap();
        let store = RecordStore::open(&path).unwrap();
        assert!(store.is_empty());
        assert_eq!(std::fs::read(&path).unwrap(), b"");
    }
}
