//! Line-delimited JSON metrics, one record per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Appends serialized records to an optional sink and keeps them in memory.
pub struct MetricsLog<R> {
    records: Vec<R>,
    sink: Option<BufWriter<File>>,
}

impl<R: Serialize> Default for MetricsLog<R> {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl<R: Serialize> MetricsLog<R> {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            sink: None,
        }
    }

    /// Records are also written to `path`, which is truncated first.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    /// Continues a log written by an interrupted run: lines whose `step`
    /// exceeds `step` are dropped and new records are appended after the
    /// rest. A missing file starts empty.
    pub fn resume_file(path: &Path, step: u64) -> Result<Self> {
        let mut kept = String::new();
        if path.exists() {
            for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
                let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    msg: format!("line {}: {e}", n + 1),
                })?;
                if v.get("step").and_then(serde_json::Value::as_u64).is_some_and(|s| s <= step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept)?;
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, record: R) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn into_records(mut self) -> Result<Vec<R>> {
        self.flush()?;
        Ok(std::mem::take(&mut self.records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Rec {
        step: u64,
    }

    #[test]
    fn resume_drops_records_past_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::to_file(&p).unwrap();
        for step in 1..=5 {
            log.push(Rec { step }).unwrap();
        }
        drop(log);
        let mut log = MetricsLog::resume_file(&p, 3).unwrap();
        log.push(Rec { step: 4 }).unwrap();
        log.flush().unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"step\":1}\n{\"step\":2}\n{\"step\":3}\n{\"step\":4}\n");
    }
}
