//! Dataset records and the packed encoder input derived from them.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::Vocab;

/// One text-to-SQL sample as stored in the JSON-lines dataset files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Example {
    /// Question word tokens (history turns already concatenated with `|`).
    pub question: Vec<String>,
    /// Table name tokens, one inner list per table.
    pub tables: Vec<Vec<String>>,
    /// `(owning table index, column name tokens)` per column.
    pub columns: Vec<(usize, Vec<String>)>,
    /// Gold SQL in canonical text form.
    pub sql: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub turn_id: Option<u32>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("example has an empty {0} segment")]
    EmptySegment(&'static str),
    #[error("column {column} references table {table} but only {tables} tables exist")]
    BadOwner {
        column: usize,
        table: usize,
        tables: usize,
    },
}

impl Example {
    /// Identifier form of a table name: its tokens joined with `_`.
    pub fn table_name(&self, i: usize) -> String {
        self.tables[i].join("_")
    }

    pub fn column_name(&self, i: usize) -> String {
        self.columns[i].1.join("_")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.question.is_empty() {
            return Err(DataError::EmptySegment("question"));
        }
        if self.tables.is_empty() {
            return Err(DataError::EmptySegment("tables"));
        }
        if self.columns.is_empty() {
            return Err(DataError::EmptySegment("columns"));
        }
        for (ci, (t, _)) in self.columns.iter().enumerate() {
            if *t >= self.tables.len() {
                return Err(DataError::BadOwner {
                    column: ci,
                    table: *t,
                    tables: self.tables.len(),
                });
            }
        }
        Ok(())
    }
}

/// Concatenate history utterances with the current one, separated by `|`.
pub fn flatten_turns(history: &[Vec<String>], current: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for turn in history {
        out.extend_from_slice(turn);
        out.push("|".to_string());
    }
    out.extend_from_slice(current);
    out
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(&line).map_err(|source| DataError::Json { line: i + 1, source })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(examples: &[Example], path: &Path) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Token-id view of one example, packed for the encoder.
#[derive(Debug, Clone)]
pub struct SchemaInput {
    pub question_tokens: Vec<u32>,
    pub tables: Vec<Vec<u32>>,
    /// `(owning table index, name token ids)` per column.
    pub columns: Vec<(usize, Vec<u32>)>,
}

impl SchemaInput {
    pub fn from_example(ex: &Example, vocab: &Vocab) -> Result<SchemaInput, DataError> {
        ex.validate()?;
        Ok(SchemaInput {
            question_tokens: vocab.encode(&ex.question),
            tables: ex.tables.iter().map(|t| vocab.encode(t)).collect(),
            columns: ex
                .columns
                .iter()
                .map(|(t, c)| (*t, vocab.encode(c)))
                .collect(),
        })
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }
}
