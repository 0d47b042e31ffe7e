//! Token vocabulary shared by the encoder and the token generator.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const START: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<start>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary must start with the reserved tokens {RESERVED:?}")]
    BadReserved,
    #[error("duplicate token `{0}`")]
    Duplicate(String),
}

/// One token per line; the id is the line number. Lines 0..3 are reserved.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary from an iterator of tokens (reserved ids are
    /// prepended; duplicates are ignored, first occurrence wins).
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Vocab {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        for t in tokens {
            if !v.index.contains_key(t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, tok: &str) {
        self.index.insert(tok.to_string(), self.tokens.len() as u32);
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn try_id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, VocabError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for line in f.lines() {
            let line = line?;
            let tok = line.trim_end();
            if index.insert(tok.to_string(), tokens.len() as u32).is_some() {
                return Err(VocabError::Duplicate(tok.to_string()));
            }
            tokens.push(tok.to_string());
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(|s| s.as_str()) != Some(*want) {
                return Err(VocabError::BadReserved);
            }
        }
        Ok(Vocab { tokens, index })
    }
}
