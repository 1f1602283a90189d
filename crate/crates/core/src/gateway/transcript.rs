//! Append-only JSON-lines store of request digests and responses.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    #[default]
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub digest: String,
    pub kind: EntryKind,
    pub response: Value,
}

#[derive(Debug)]
pub struct Transcript {
    mode: GatewayMode,
    entries: HashMap<String, TranscriptLine>,
    sink: Option<File>,
    path: Option<PathBuf>,
}

impl Transcript {
    /// An in-memory transcript, never persisted.
    pub fn in_memory(mode: GatewayMode) -> Self {
        Self {
            mode,
            entries: HashMap::new(),
            sink: None,
            path: None,
        }
    }

    /// Opens `path`. Replay requires the file to exist; record creates it and
    /// appends. When a digest repeats in the file, the last line wins.
    pub fn open(path: &Path, mode: GatewayMode) -> Result<Self, GatewayError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| transcript_io(path, e))?;
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| transcript_io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: TranscriptLine = serde_json::from_str(&line)
                    .map_err(|e| GatewayError::Transcript(format!("{}:{}: {e}", path.display(), idx + 1)))?;
                entries.insert(parsed.digest.clone(), parsed);
            }
        } else if mode == GatewayMode::Replay {
            return Err(GatewayError::Transcript(format!(
                "replay transcript {} does not exist",
                path.display()
            )));
        }
        let sink = match mode {
            GatewayMode::Record => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| transcript_io(path, e))?,
            ),
            _ => None,
        };
        Ok(Self {
            mode,
            entries,
            sink,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, digest: &str) -> Option<&TranscriptLine> {
        self.entries.get(digest)
    }

    pub fn insert(&mut self, line: TranscriptLine) -> Result<(), GatewayError> {
        if let Some(sink) = &mut self.sink {
            let mut text = serde_json::to_string(&line).map_err(|e| GatewayError::Transcript(e.to_string()))?;
            text.push('\n');
            sink.write_all(text.as_bytes())
                .and_then(|_| sink.flush())
                .map_err(|e| GatewayError::Transcript(e.to_string()))?;
        }
        self.entries.insert(line.digest.clone(), line);
        Ok(())
    }
}

fn transcript_io(path: &Path, e: std::io::Error) -> GatewayError {
    GatewayError::Transcript(format!("{}: {e}", path.display()))
}
