//! SQL tokenizer for the grammar-covered subset.

use super::SqlError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    /// Identifier or keyword, original casing preserved.
    Word(String),
    Number(String),
    /// Single-quoted string literal, quotes stripped.
    Str(String),
    /// One of `( ) , . * = != <> < <= > >=`.
    Sym(&'static str),
}

impl Tok {
    pub fn is_kw(&self, kw: &str) -> bool {
        matches!(self, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    pub fn describe(&self) -> String {
        match self {
            Tok::Word(w) => w.clone(),
            Tok::Number(n) => n.clone(),
            Tok::Str(s) => format!("'{s}'"),
            Tok::Sym(s) => s.to_string(),
        }
    }
}

pub fn lex(sql: &str) -> Result<Vec<Tok>, SqlError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\'' || c == '"' {
            let quote = c;
            let mut s = String::new();
            i += 1;
            while i < chars.len() && chars[i] != quote {
                s.push(chars[i]);
                i += 1;
            }
            if i >= chars.len() {
                return Err(SqlError::Malformed {
                    pos: i,
                    msg: "unterminated string literal".into(),
                });
            }
            i += 1;
            out.push(Tok::Str(s));
            continue;
        }
        if c.is_ascii_digit() {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                s.push(chars[i]);
                i += 1;
            }
            out.push(Tok::Number(s));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
            }
            out.push(Tok::Word(s));
            continue;
        }
        let two: String = chars[i..chars.len().min(i + 2)].iter().collect();
        let sym: Option<&'static str> = match two.as_str() {
            "!=" => Some("!="),
            "<>" => Some("!="),
            "<=" => Some("<="),
            ">=" => Some(">="),
            _ => None,
        };
        if let Some(s) = sym {
            out.push(Tok::Sym(s));
            i += 2;
            continue;
        }
        let one: Option<&'static str> = match c {
            '(' => Some("("),
            ')' => Some(")"),
            ',' => Some(","),
            '.' => Some("."),
            '*' => Some("*"),
            '=' => Some("="),
            '<' => Some("<"),
            '>' => Some(">"),
            _ => None,
        };
        match one {
            Some(s) => {
                out.push(Tok::Sym(s));
                i += 1;
            }
            None => {
                return Err(SqlError::Malformed {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(out)
}

/// Literal-ish tokens of a SQL string (numbers and words inside quotes),
/// used when building ad-hoc vocabularies.
pub fn literal_tokens(sql: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(toks) = lex(sql) {
        for t in toks {
            match t {
                Tok::Number(n) => out.push(n),
                Tok::Str(s) => out.extend(s.split_whitespace().map(|w| w.to_lowercase())),
                _ => {}
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_mixed_tokens() {
        let toks = lex("SELECT COUNT(*) FROM t WHERE a >= 3 AND b != 'rock pop'").unwrap();
        assert!(toks[0].is_kw("select"));
        assert_eq!(toks[2], Tok::Sym("("));
        assert_eq!(toks[3], Tok::Sym("*"));
        assert!(toks.contains(&Tok::Sym(">=")));
        assert!(toks.contains(&Tok::Number("3".into())));
        assert!(toks.contains(&Tok::Str("rock pop".into())));
    }

    #[test]
    fn rejects_unterminated_string() {
        assert!(lex("SELECT 'oops").is_err());
    }
}
