//! Deterministic bidirectional transpiler between SQL text (the subset the
//! grammar covers) and typed ASTs, plus the exact-set-match evaluator.

mod eval;
mod lex;
mod parse;
mod print;

pub use eval::{exact_set_match, EmOutcome};
pub use parse::sql_to_ast;
pub use print::ast_to_sql;

use std::collections::HashMap;

use thiserror::Error;

use crate::data::Example;

#[derive(Debug, Error)]
pub enum SqlError {
    #[error("position {pos}: malformed SQL: {msg}")]
    Malformed { pos: usize, msg: String },
    #[error("position {pos}: unsupported construct: {what}")]
    Unsupported { pos: usize, what: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("ambiguous column `{0}`; qualify it with a table name")]
    AmbiguousColumn(String),
    #[error("unknown alias `{0}`")]
    UnknownAlias(String),
    #[error("AST is incomplete")]
    IncompleteAst,
    #[error("AST node is not printable: {0}")]
    BadAst(String),
}

/// Name-resolution view of one example's schema. Identifiers are the
/// lower-cased name tokens joined with `_`.
#[derive(Debug, Clone)]
pub struct Schema {
    pub tables: Vec<String>,
    /// `(owning table, identifier)` per column.
    pub columns: Vec<(usize, String)>,
    table_by_name: HashMap<String, usize>,
    columns_by_name: HashMap<String, Vec<usize>>,
}

impl Schema {
    pub fn from_example(ex: &Example) -> Schema {
        let tables: Vec<String> = (0..ex.tables.len())
            .map(|i| ex.table_name(i).to_lowercase())
            .collect();
        let columns: Vec<(usize, String)> = ex
            .columns
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (*t, ex.column_name(i).to_lowercase()))
            .collect();
        let mut table_by_name = HashMap::new();
        for (i, t) in tables.iter().enumerate() {
            table_by_name.insert(t.clone(), i);
        }
        let mut columns_by_name: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (_, c)) in columns.iter().enumerate() {
            columns_by_name.entry(c.clone()).or_default().push(i);
        }
        Schema {
            tables,
            columns,
            table_by_name,
            columns_by_name,
        }
    }

    pub fn table_named(&self, name: &str) -> Option<usize> {
        self.table_by_name.get(&name.to_lowercase()).copied()
    }

    /// Resolve a possibly-qualified column. `table` restricts the search to
    /// one table's columns (plus the shared `*`).
    pub fn resolve_column(&self, table: Option<usize>, name: &str) -> Result<usize, SqlError> {
        let lname = name.to_lowercase();
        let cands = self
            .columns_by_name
            .get(&lname)
            .ok_or_else(|| SqlError::UnknownColumn(name.to_string()))?;
        match table {
            Some(t) => cands
                .iter()
                .copied()
                .find(|&c| self.columns[c].0 == t || self.columns[c].1 == "*")
                .ok_or_else(|| SqlError::UnknownColumn(format!("{}.{}", self.tables[t], name))),
            None => {
                if cands.len() > 1 {
                    return Err(SqlError::AmbiguousColumn(name.to_string()));
                }
                Ok(cands[0])
            }
        }
    }

    pub fn star_column(&self) -> Result<usize, SqlError> {
        self.columns
            .iter()
            .position(|(_, n)| n == "*")
            .ok_or_else(|| SqlError::UnknownColumn("*".to_string()))
    }
}

/// Test helpers shared across the crate's unit tests.
#[cfg(test)]
pub mod tests_support {
    use super::*;
    use crate::ast::Ast;
    use crate::grammar::Grammar;
    use crate::vocab::Vocab;

    /// A small concert-domain example used throughout the tests.
    pub fn demo_example() -> Example {
        Example {
            question: vec!["how", "many", "singer", "do", "we", "have", "with", "age", "above", "3", "?"]
                .into_iter()
                .map(String::from)
                .collect(),
            tables: vec![vec!["singer".into()], vec!["concert".into()]],
            columns: vec![
                (0, vec!["*".into()]),
                (0, vec!["name".into()]),
                (0, vec!["age".into()]),
                (1, vec!["year".into()]),
                (1, vec!["name".into()]),
            ],
            sql: "SELECT COUNT(*) FROM singer".into(),
            turn_id: None,
        }
    }

    pub fn vocab_for(ex: &Example, sql: &str) -> Vocab {
        let mut toks: Vec<String> = ex.question.clone();
        for t in &ex.tables {
            toks.extend_from_slice(t);
        }
        for (_, c) in &ex.columns {
            toks.extend_from_slice(c);
        }
        for w in crate::sql::lex::literal_tokens(sql) {
            toks.push(w);
        }
        Vocab::build(toks.iter().map(|s| s.as_str()))
    }

    pub fn parse_sql(g: &Grammar, ex: &Example, sql: &str) -> Ast {
        let schema = Schema::from_example(ex);
        let vocab = vocab_for(ex, sql);
        sql_to_ast(sql, g, &schema, &vocab).expect("test SQL parses")
    }

    /// The worked single-table counting query.
    pub fn parse_demo_sql(g: &Grammar) -> Ast {
        parse_sql(g, &demo_example(), "SELECT COUNT(*) FROM singer")
    }
}
