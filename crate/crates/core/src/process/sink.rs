//! Append-only JSONL persistence for step records, written as each step
//! commits so interrupted runs can resume from the last complete step.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use crate::model::{RunTrace, StepRecord, TerminalReason};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("trace sink i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace file line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub trait TraceSink: Send + Sync {
    fn append_step(&self, theorem_id: &str, record: &StepRecord) -> Result<(), SinkError>;
    fn append_terminal(&self, theorem_id: &str, reason: TerminalReason) -> Result<(), SinkError>;
}

/// Discards everything; for tests and dry runs.
pub struct NullSink;

impl TraceSink for NullSink {
    fn append_step(&self, _theorem_id: &str, _record: &StepRecord) -> Result<(), SinkError> {
        Ok(())
    }

    fn append_terminal(&self, _theorem_id: &str, _reason: TerminalReason) -> Result<(), SinkError> {
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SinkLine {
    Header {
        schema_version: u32,
        config: serde_json::Value,
    },
    Step {
        schema_version: u32,
        theorem_id: String,
        record: StepRecord,
    },
    Terminal {
        schema_version: u32,
        theorem_id: String,
        reason: TerminalReason,
    },
}

/// One record per line; every append is flushed before returning.
pub struct JsonlSink {
    writer: Mutex<BufWriter<File>>,
}

impl JsonlSink {
    /// Creates (truncating) a trace file with a provenance header line.
    pub fn create(path: &Path, config_header: serde_json::Value) -> Result<Self, SinkError> {
        let file = File::create(path)?;
        let sink = Self {
            writer: Mutex::new(BufWriter::new(file)),
        };
        sink.write_line(&SinkLine::Header {
            schema_version: SCHEMA_VERSION,
            config: config_header,
        })?;
        Ok(sink)
    }

    /// Opens an existing trace file for appending (resume).
    pub fn append_to(path: &Path) -> Result<Self, SinkError> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    fn write_line(&self, line: &SinkLine) -> Result<(), SinkError> {
        let json = serde_json::to_string(line)
            .map_err(|e| SinkError::Io(std::io::Error::other(e)))?;
        let mut writer = self.writer.lock().expect("sink lock");
        writeln!(writer, "{json}")?;
        writer.flush()?;
        Ok(())
    }
}

impl TraceSink for JsonlSink {
    fn append_step(&self, theorem_id: &str, record: &StepRecord) -> Result<(), SinkError> {
        self.write_line(&SinkLine::Step {
            schema_version: SCHEMA_VERSION,
            theorem_id: theorem_id.to_string(),
            record: record.clone(),
        })
    }

    fn append_terminal(&self, theorem_id: &str, reason: TerminalReason) -> Result<(), SinkError> {
        self.write_line(&SinkLine::Terminal {
            schema_version: SCHEMA_VERSION,
            theorem_id: theorem_id.to_string(),
            reason,
        })
    }
}

/// Everything read back from a trace file.
#[derive(Debug, Default)]
pub struct SinkContents {
    pub header: Option<serde_json::Value>,
    pub theorems: BTreeMap<String, PartialTrace>,
}

/// Per-theorem state as persisted; may lack a terminal marker after a crash.
#[derive(Debug, Default)]
pub struct PartialTrace {
    pub records: Vec<StepRecord>,
    pub terminal: Option<TerminalReason>,
}

impl PartialTrace {
    /// A trace counts as complete when it ended for a non-resumable reason.
    pub fn is_complete(&self) -> bool {
        self.terminal.is_some_and(|r| r.is_complete())
    }

    pub fn into_trace(self, theorem_id: &str) -> Option<RunTrace> {
        self.terminal.map(|terminal_reason| RunTrace {
            theorem_id: theorem_id.to_string(),
            records: self.records,
            terminal_reason,
        })
    }
}

/// Reads a trace file back. Steps are keyed by index so re-appended steps
/// after a resumed truncation overwrite their predecessors; the last terminal
/// marker wins.
pub fn load_sink(path: &Path) -> Result<SinkContents, SinkError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut contents = SinkContents::default();
    let mut steps: BTreeMap<String, BTreeMap<usize, StepRecord>> = BTreeMap::new();

    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SinkLine = serde_json::from_str(&line).map_err(|e| SinkError::Malformed {
            line: index + 1,
            message: e.to_string(),
        })?;
        match parsed {
            SinkLine::Header { config, .. } => contents.header = Some(config),
            SinkLine::Step {
                theorem_id, record, ..
            } => {
                steps
                    .entry(theorem_id)
                    .or_default()
                    .insert(record.step_index, record);
            }
            SinkLine::Terminal {
                theorem_id, reason, ..
            } => {
                contents
                    .theorems
                    .entry(theorem_id)
                    .or_default()
                    .terminal = Some(reason);
            }
        }
    }
    for (theorem_id, by_step) in steps {
        contents
            .theorems
            .entry(theorem_id)
            .or_default()
            .records = by_step.into_values().collect();
    }
    Ok(contents)
}
