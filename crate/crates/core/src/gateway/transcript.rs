use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// One completion as logged for audit and replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub sample_id: String,
    pub query_index: usize,
    pub prompt_sha256: String,
    pub raw_text: String,
    pub parsed_answer: String,
    pub latency_ms: u64,
}

pub type TranscriptKey = (String, usize, String);

impl TranscriptRecord {
    pub fn key(&self) -> TranscriptKey {
        (self.sample_id.clone(), self.query_index, self.prompt_sha256.clone())
    }
}

/// Reads a JSON Lines transcript. A final line cut short by an interrupted
/// write is ignored; any other bad line is an error.
pub fn read_transcripts(path: &Path) -> io::Result<Vec<TranscriptRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Append-only transcript log, safe to share between threads.
pub struct TranscriptWriter {
    file: Mutex<File>,
}

impl TranscriptWriter {
    /// Opens `path` for appending, cutting any partial final line.
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let bytes = fs::read(path)?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if keep != bytes.len() {
            file.set_len(keep as u64)?;
        }
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &TranscriptRecord) -> io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}
