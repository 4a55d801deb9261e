use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::model::{AnnotationRecord, DerivedRecord, ImageRecord, PatientRecord};

/// One entry of `meta.log`. Framed as a 4-byte big-endian length followed by
/// the JSON encoding of this enum.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rec", rename_all = "snake_case")]
pub enum Record {
    Patient(PatientRecord),
    Image(ImageRecord),
    Derived(DerivedRecord),
    Annotation(AnnotationRecord),
    /// Opaque keyed document; the latest entry per `(kind, key)` wins.
    Doc {
        kind: String,
        key: String,
        body: serde_json::Value,
    },
}

pub(super) enum LogSink {
    File(File),
    Memory(Vec<u8>),
}

impl LogSink {
    /// Opens (or creates) a log file and returns it with its valid records.
    /// A torn tail left by a crash is cut off.
    pub fn open_file(path: &Path) -> Result<(LogSink, Vec<Record>), StoreError> {
        let mut f = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let (records, good) = decode_all(&buf);
        if good < buf.len() {
            tracing::warn!(path = %path.display(), dropped = buf.len() - good, "truncating torn log tail");
            f.set_len(good as u64)?;
            f.seek(SeekFrom::End(0))?;
        }
        Ok((LogSink::File(f), records))
    }

    pub fn append(&mut self, rec: &Record) -> Result<u64, StoreError> {
        let body = serde_json::to_vec(rec).map_err(|e| StoreError::IoFailure(e.to_string()))?;
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        match self {
            LogSink::File(f) => {
                f.write_all(&frame)?;
                f.sync_data()?;
            }
            LogSink::Memory(v) => v.extend_from_slice(&frame),
        }
        Ok(frame.len() as u64)
    }

    pub fn bytes(&self) -> Result<Vec<u8>, StoreError> {
        match self {
            LogSink::Memory(v) => Ok(v.clone()),
            LogSink::File(f) => {
                let mut f = f.try_clone()?;
                f.seek(SeekFrom::Start(0))?;
                let mut buf = Vec::new();
                f.read_to_end(&mut buf)?;
                Ok(buf)
            }
        }
    }
}

/// Decodes consecutive frames; returns the records and the byte length of the
/// valid prefix.
pub fn decode_all(buf: &[u8]) -> (Vec<Record>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 4 <= buf.len() {
        let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let Some(body) = buf.get(pos + 4..pos + 4 + len) else {
            break;
        };
        match serde_json::from_slice(body) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
        pos += 4 + len;
    }
    (out, pos)
}
