//! Append-only JSON-lines ledger. Every record is flushed to disk before the
//! submission's response is sent; a torn final line left by a crash is
//! discarded on open.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use fairbounty_core::{EngineSnapshot, Verdict};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: u64,
    pub submitter: String,
    /// Seconds since the Unix epoch; informational only.
    pub received_at: u64,
    /// Canonical documents; absent when the submission did not parse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Present iff the checker processed the submission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_after: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LedgerRecord {
    Submission(SubmissionRecord),
    Snapshot {
        after_id: u64,
        engine: EngineSnapshot,
    },
}

pub struct Ledger {
    path: PathBuf,
    file: File,
}

impl Ledger {
    /// Opens or creates the ledger and returns its records.
    pub fn open(path: &Path) -> Result<(Self, Vec<LedgerRecord>), ServiceError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut records = Vec::new();
        let mut valid_len = 0usize;
        for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
            let complete = line.ends_with(b"\n");
            let body = line.strip_suffix(b"\n").unwrap_or(line);
            if complete && body.iter().all(u8::is_ascii_whitespace) {
                valid_len += line.len();
                continue;
            }
            match serde_json::from_slice::<LedgerRecord>(body) {
                Ok(r) if complete => {
                    records.push(r);
                    valid_len += line.len();
                }
                Err(e) if complete => {
                    return Err(ServiceError::Ledger(format!(
                        "{}: line {}: {e}",
                        path.display(),
                        i + 1
                    )))
                }
                // only the final line can lack a newline: a torn write
                _ => break,
            }
        }
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            Ledger {
                path: path.to_owned(),
                file,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and syncs it to disk.
    pub fn append(&mut self, record: &LedgerRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(record).expect("ledger records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64) -> LedgerRecord {
        LedgerRecord::Submission(SubmissionRecord {
            id,
            submitter: "alice".into(),
            received_at: 0,
            group: Some("{\"kind\":\"constant\",\"label\":1}".into()),
            model: Some("{\"kind\":\"constant\",\"label\":0}".into()),
            verdict: Some(Verdict::Reject),
            level_after: Some(0),
            error: None,
        })
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let (mut ledger, records) = Ledger::open(&path).unwrap();
        assert!(records.is_empty());
        ledger.append(&record(1)).unwrap();
        ledger.append(&record(2)).unwrap();
        drop(ledger);
        let (_, records) = Ledger::open(&path).unwrap();
        assert_eq!(records, vec![record(1), record(2)]);
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let (mut ledger, _) = Ledger::open(&path).unwrap();
        ledger.append(&record(1)).unwrap();
        drop(ledger);
        let good = std::fs::read(&path).unwrap();
        let mut torn = good.clone();
        torn.extend_from_slice(b"{\"type\":\"submission\",\"id\":2,\"subm");
        std::fs::write(&path, &torn).unwrap();

        let (mut ledger, records) = Ledger::open(&path).unwrap();
        assert_eq!(records, vec![record(1)]);
        assert_eq!(std::fs::read(&path).unwrap(), good);
        ledger.append(&record(2)).unwrap();
        drop(ledger);
        let (_, records) = Ledger::open(&path).unwrap();
        assert_eq!(records, vec![record(1), record(2)]);
    }

    #[test]
    fn complete_final_line_without_newline_is_kept_out() {
        // a record whose newline never hit the disk was not acknowledged
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let line = serde_json::to_string(&record(1)).unwrap();
        std::fs::write(&path, &line).unwrap();
        let (_, records) = Ledger::open(&path).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let line = serde_json::to_string(&record(2)).unwrap();
        std::fs::write(&path, format!("garbage\n{line}\n")).unwrap();
        assert!(matches!(Ledger::open(&path), Err(ServiceError::Ledger(_))));
    }
}
