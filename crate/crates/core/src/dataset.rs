//! JSONL dataset ingestion: one theorem object per line.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

use crate::model::NLTheorem;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: crate::model::ModelError,
    },
}

/// On-disk record shape; `split` is an optional benchmark tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub nl_statement: String,
    pub nl_proof: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Loads a JSONL dataset, rejecting any malformed line, duplicate ids, and
/// (unless admitted) empty proofs. Datasets are small and must be clean, so
/// every problem aborts the load with its line number.
pub fn load_dataset(path: &Path, allow_empty_proofs: bool) -> Result<Vec<NLTheorem>, DatasetError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut theorems = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (index, line) in reader.lines().enumerate() {
        let line_number = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: line_number,
                message: e.to_string(),
            })?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                first_line,
                second_line: line_number,
            });
        }
        seen.insert(record.id.clone(), line_number);
        let theorem = NLTheorem {
            id: record.id,
            nl_statement: record.nl_statement,
            nl_proof: record.nl_proof,
            source_tag: record.split,
        };
        theorem
            .validate(allow_empty_proofs)
            .map_err(|source| DatasetError::Invalid {
                line: line_number,
                source,
            })?;
        theorems.push(theorem);
    }
    Ok(theorems)
}

/// Writes theorems back out in the load format.
pub fn save_dataset(theorems: &[NLTheorem], path: &Path) -> Result<(), DatasetError> {
    let mut file = std::fs::File::create(path)?;
    for theorem in theorems {
        let record = DatasetRecord {
            id: theorem.id.clone(),
            nl_statement: theorem.nl_statement.clone(),
            nl_proof: theorem.nl_proof.clone(),
            split: theorem.source_tag.clone(),
        };
        let json = serde_json::to_string(&record)
            .map_err(|e| std::io::Error::other(e))?;
        writeln!(file, "{json}")?;
    }
    Ok(())
}
