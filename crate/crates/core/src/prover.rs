//! The hard validity gate: runs a proof checker over candidate bodies and
//! renders diagnostics into the error-feedback text consumed by repair
//! generators.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

use crate::model::{body_fingerprint, Formalization};

#[derive(Debug, Error)]
pub enum ProverError {
    #[error("candidate body is empty")]
    EmptyBody,
    /// Distinct from a failed check: the checker itself could not run, so
    /// the step must abort instead of scoring the candidate invalid.
    #[error("prover backend unavailable: {0}")]
    Unavailable(String),
    #[error("error feedback requested for a passing check")]
    FeedbackOnPass,
    #[error("prover i/o failure: {0}")]
    Io(String),
}

/// One checker message with 1-based line and column positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticMessage {
    pub line: u32,
    pub start_col: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_col: Option<u32>,
    pub text: String,
}

/// Outcome of one validity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProverDiagnostics {
    pub passed: bool,
    pub messages: Vec<DiagnosticMessage>,
    pub elapsed: Duration,
    pub timed_out: bool,
}

impl ProverDiagnostics {
    pub fn pass(elapsed: Duration) -> Self {
        Self {
            passed: true,
            messages: Vec::new(),
            elapsed,
            timed_out: false,
        }
    }

    pub fn failure(messages: Vec<DiagnosticMessage>, elapsed: Duration, timed_out: bool) -> Self {
        Self {
            passed: false,
            messages,
            elapsed,
            timed_out,
        }
    }
}

pub trait ProverBackend: Send + Sync {
    fn check(&self, body: &str, timeout: Duration) -> Result<ProverDiagnostics, ProverError>;
    fn name(&self) -> &str;
}

/// Gate configuration wrapping a backend: timeout, placeholder blocklist,
/// and truncation limits for repair feedback.
#[derive(Clone)]
pub struct ProverGate {
    pub backend: Arc<dyn ProverBackend>,
    pub timeout: Duration,
    pub blocklist: Vec<String>,
    pub feedback_max_messages: usize,
    pub feedback_max_chars: usize,
}

impl ProverGate {
    pub fn new(backend: Arc<dyn ProverBackend>) -> Self {
        Self {
            backend,
            timeout: Duration::from_secs(120),
            blocklist: default_blocklist(),
            feedback_max_messages: 20,
            feedback_max_chars: 4000,
        }
    }

    /// Validity bit for one candidate: 1 only when the checker accepts the
    /// body within the timeout and no blocklisted placeholder appears.
    ///
    /// A placeholder-accepted file is not a full formalization, so the
    /// blocklist applies even when the checker would pass it; the scan runs
    /// first and skips the (expensive) checker entirely on a hit.
    pub fn check_validity(
        &self,
        x: &Formalization,
    ) -> Result<(bool, ProverDiagnostics), ProverError> {
        if x.body.is_empty() {
            return Err(ProverError::EmptyBody);
        }
        if let Some(diagnostic) = self.placeholder_hit(&x.body) {
            return Ok((
                false,
                ProverDiagnostics::failure(vec![diagnostic], Duration::ZERO, false),
            ));
        }
        let diagnostics = self.backend.check(&x.body, self.timeout)?;
        Ok((diagnostics.passed, diagnostics))
    }

    fn placeholder_hit(&self, body: &str) -> Option<DiagnosticMessage> {
        for token in &self.blocklist {
            let pattern = format!(r"\b{}\b", regex::escape(token));
            let re = regex::Regex::new(&pattern).expect("valid placeholder pattern");
            if let Some(found) = re.find(body) {
                let prefix = &body[..found.start()];
                let line = prefix.matches('\n').count() as u32 + 1;
                let start_col = prefix
                    .rsplit_once('\n')
                    .map_or(prefix.len(), |(_, tail)| tail.len())
                    as u32;
                return Some(DiagnosticMessage {
                    line,
                    start_col,
                    end_col: Some(start_col + token.len() as u32),
                    text: format!("placeholder token '{token}' is not allowed in a full formalization"),
                });
            }
        }
        None
    }

    /// Repair feedback bounded for prompt embedding: first
    /// `feedback_max_messages` messages, capped at `feedback_max_chars`.
    pub fn repair_feedback(&self, diagnostics: &ProverDiagnostics) -> Result<String, ProverError> {
        let text = format_error_feedback_limited(diagnostics, self.feedback_max_messages)?;
        if text.len() > self.feedback_max_chars {
            let mut cut = self.feedback_max_chars;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            Ok(text[..cut].to_string())
        } else {
            Ok(text)
        }
    }
}

pub fn default_blocklist() -> Vec<String> {
    vec!["sorry".to_string(), "admit".to_string()]
}

/// Renders diagnostics into the repair-prompt feedback format, one line per
/// message in input order:
///
/// `Error on line {line}, start column {start}, end column {end}: {text}`
///
/// A missing end column renders as the literal token `None`.
pub fn format_error_feedback(diagnostics: &ProverDiagnostics) -> Result<String, ProverError> {
    format_error_feedback_limited(diagnostics, usize::MAX)
}

fn format_error_feedback_limited(
    diagnostics: &ProverDiagnostics,
    max_messages: usize,
) -> Result<String, ProverError> {
    if diagnostics.passed {
        return Err(ProverError::FeedbackOnPass);
    }
    let lines: Vec<String> = diagnostics
        .messages
        .iter()
        .take(max_messages)
        .map(|m| {
            let end = m
                .end_col
                .map_or_else(|| "None".to_string(), |c| c.to_string());
            // Keep one message per line so the format stays re-parseable.
            let text = m.text.replace(['\n', '\r'], " ");
            format!(
                "Error on line {}, start column {}, end column {}: {}",
                m.line, m.start_col, end, text
            )
        })
        .collect();
    Ok(lines.join("\n"))
}

/// Table-driven backend for tests and offline runs: pass/fail keyed by body
/// fingerprint, with a configurable default.
pub struct MockProver {
    default_pass: bool,
    outcomes: BTreeMap<String, Vec<DiagnosticMessage>>,
    passes: Vec<String>,
}

impl MockProver {
    pub fn new(default_pass: bool) -> Self {
        Self {
            default_pass,
            outcomes: BTreeMap::new(),
            passes: Vec::new(),
        }
    }

    pub fn pass_body(mut self, body: &str) -> Self {
        self.passes.push(body_fingerprint(body));
        self
    }

    pub fn fail_body(mut self, body: &str, messages: Vec<DiagnosticMessage>) -> Self {
        self.outcomes.insert(body_fingerprint(body), messages);
        self
    }

    pub fn pass_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.passes.push(fingerprint.into());
        self
    }

    pub fn fail_fingerprint(
        mut self,
        fingerprint: impl Into<String>,
        messages: Vec<DiagnosticMessage>,
    ) -> Self {
        self.outcomes.insert(fingerprint.into(), messages);
        self
    }
}

impl ProverBackend for MockProver {
    fn check(&self, body: &str, _timeout: Duration) -> Result<ProverDiagnostics, ProverError> {
        let fingerprint = body_fingerprint(body);
        if let Some(messages) = self.outcomes.get(&fingerprint) {
            return Ok(ProverDiagnostics::failure(
                messages.clone(),
                Duration::ZERO,
                false,
            ));
        }
        if self.passes.contains(&fingerprint) || self.default_pass {
            return Ok(ProverDiagnostics::pass(Duration::ZERO));
        }
        Ok(ProverDiagnostics::failure(
            vec![DiagnosticMessage {
                line: 1,
                start_col: 0,
                end_col: None,
                text: "mock prover rejected this body".to_string(),
            }],
            Duration::ZERO,
            false,
        ))
    }

    fn name(&self) -> &str {
        "mock-prover"
    }
}

/// How an external checker reports diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticFormat {
    /// `<path>:<line>:<col>: error: <message>` lines on stdout/stderr.
    Lines,
    /// One JSON object per line: `{"line":..,"start_col":..,"end_col":..,"message":".."}`.
    Jsonl,
}

/// Runs a configured command over a temp file holding the body.
/// Exit code 0 means pass; anything else is a fail with parsed diagnostics.
pub struct CommandProver {
    /// Command template; `{file}` is replaced with the temp-file path.
    pub template: String,
    pub format: DiagnosticFormat,
}

impl CommandProver {
    pub fn new(template: impl Into<String>, format: DiagnosticFormat) -> Self {
        Self {
            template: template.into(),
            format,
        }
    }

    fn parse_diagnostics(&self, output: &str) -> Vec<DiagnosticMessage> {
        match self.format {
            DiagnosticFormat::Lines => {
                let re = regex::Regex::new(r"^(?:[^:\n]+):(\d+):(\d+): error: (.*)$")
                    .expect("valid diagnostic pattern");
                output
                    .lines()
                    .filter_map(|line| {
                        re.captures(line).map(|c| DiagnosticMessage {
                            line: c[1].parse().unwrap_or(1),
                            start_col: c[2].parse().unwrap_or(0),
                            end_col: None,
                            text: c[3].to_string(),
                        })
                    })
                    .collect()
            }
            DiagnosticFormat::Jsonl => output
                .lines()
                .filter_map(|line| serde_json::from_str::<JsonDiagnostic>(line).ok())
                .map(|d| DiagnosticMessage {
                    line: d.line,
                    start_col: d.start_col,
                    end_col: d.end_col,
                    text: d.message,
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct JsonDiagnostic {
    line: u32,
    #[serde(default)]
    start_col: u32,
    #[serde(default)]
    end_col: Option<u32>,
    message: String,
}

fn read_to_string_thread<R: Read + Send + 'static>(
    source: R,
) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut reader = source;
        let mut buffer = String::new();
        let _ = reader.read_to_string(&mut buffer);
        buffer
    })
}

impl ProverBackend for CommandProver {
    fn check(&self, body: &str, timeout: Duration) -> Result<ProverDiagnostics, ProverError> {
        let dir = tempfile::tempdir().map_err(|e| ProverError::Io(e.to_string()))?;
        let file_path = dir.path().join("candidate.lean");
        std::fs::write(&file_path, body).map_err(|e| ProverError::Io(e.to_string()))?;
        let command_line = self.template.replace("{file}", &file_path.to_string_lossy());

        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command_line)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ProverError::Unavailable(format!("{command_line}: {e}")))?;

        let stdout = read_to_string_thread(child.stdout.take().expect("piped stdout"));
        let stderr = read_to_string_thread(child.stderr.take().expect("piped stderr"));

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {
                    if started.elapsed() >= timeout {
                        let _ = child.kill();
                        let _ = child.wait();
                        break None;
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(ProverError::Io(e.to_string())),
            }
        };
        let elapsed = started.elapsed();
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();

        match status {
            None => Ok(ProverDiagnostics::failure(
                vec![DiagnosticMessage {
                    line: 1,
                    start_col: 0,
                    end_col: None,
                    text: format!("checker timed out after {}ms", timeout.as_millis()),
                }],
                elapsed,
                true,
            )),
            Some(status) if status.success() => Ok(ProverDiagnostics::pass(elapsed)),
            // 126/127 are the shell's "cannot execute" / "not found" codes:
            // the checker is missing, which must abort rather than score 0.
            Some(status) if matches!(status.code(), Some(126) | Some(127)) => Err(
                ProverError::Unavailable(format!("{command_line}: {}", err.trim())),
            ),
            Some(_) => {
                let combined = format!("{out}\n{err}");
                let mut messages = self.parse_diagnostics(&combined);
                if messages.is_empty() {
                    messages.push(DiagnosticMessage {
                        line: 1,
                        start_col: 0,
                        end_col: None,
                        text: format!("checker failed: {}", combined.trim()),
                    });
                }
                Ok(ProverDiagnostics::failure(messages, elapsed, false))
            }
        }
    }

    fn name(&self) -> &str {
        "command-prover"
    }
}

/// Loads a mock prover table from a JSON file:
/// `{"default_pass": bool, "pass": ["fp"...], "fail": [{"fingerprint": "fp", "messages": [...]}]}`.
#[derive(Debug, Deserialize)]
pub struct MockProverTable {
    #[serde(default)]
    pub default_pass: bool,
    #[serde(default)]
    pub pass: Vec<String>,
    #[serde(default)]
    pub fail: Vec<MockFailEntry>,
}

#[derive(Debug, Deserialize)]
pub struct MockFailEntry {
    pub fingerprint: String,
    pub messages: Vec<DiagnosticMessage>,
}

impl MockProverTable {
    pub fn from_file(path: &Path) -> std::io::Result<MockProver> {
        let text = std::fs::read_to_string(path)?;
        let table: MockProverTable = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let mut prover = MockProver::new(table.default_pass);
        for fp in table.pass {
            prover = prover.pass_fingerprint(fp);
        }
        for entry in table.fail {
            prover = prover.fail_fingerprint(entry.fingerprint, entry.messages);
        }
        Ok(prover)
    }
}
