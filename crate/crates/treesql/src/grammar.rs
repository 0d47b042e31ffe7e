//! The abstract-syntax grammar: node types and typed production rules.
//!
//! A grammar is loaded from a small line-oriented text format (see
//! [`Grammar::parse`]) and is immutable afterwards, so it can be shared
//! freely between threads.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Dense id of a node type, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub u32);

/// Dense id of a production rule, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleId(pub u32);

impl TypeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RuleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// What a node of a given type holds once expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeKind {
    NonTerminal,
    TerminalTable,
    TerminalColumn,
    TerminalToken,
}

/// The three terminal type names. Any other declared type is a non-terminal.
pub const TERMINAL_TABLE: &str = "tab_id";
pub const TERMINAL_COLUMN: &str = "col_id";
pub const TERMINAL_TOKEN: &str = "tok_id";

/// Name of the root non-terminal every grammar must declare.
pub const ROOT_TYPE: &str = "sql";

#[derive(Debug, Clone)]
pub struct NodeType {
    pub name: String,
    pub kind: TypeKind,
    pub type_index: TypeId,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub rule_index: RuleId,
    pub lhs: TypeId,
    pub constructor: String,
    pub rhs: Vec<TypeId>,
}

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undeclared type `{name}`")]
    UndeclaredType { line: usize, name: String },
    #[error("line {line}: terminal type `{name}` cannot appear on a rule left-hand side")]
    TerminalOnLhs { line: usize, name: String },
    #[error("line {line}: duplicate constructor `{ctor}` for type `{lhs}`")]
    DuplicateConstructor { line: usize, ctor: String, lhs: String },
    #[error("line {line}: duplicate type declaration `{name}`")]
    DuplicateType { line: usize, name: String },
    #[error("line {line}: only `tab_id`, `col_id`, `tok_id` may be terminals, got `{name}`")]
    BadTerminalName { line: usize, name: String },
    #[error("grammar has no root type `{ROOT_TYPE}`")]
    MissingRoot,
    #[error("non-terminal `{name}` has no rules")]
    EmptyNonTerminal { name: String },
    #[error("`{name}` is a terminal type, not a non-terminal")]
    NotANonTerminal { name: String },
}

/// A validated set of node types and production rules.
#[derive(Debug, Clone)]
pub struct Grammar {
    types: Vec<NodeType>,
    rules: Vec<Rule>,
    root: TypeId,
    type_by_name: HashMap<String, TypeId>,
    rules_by_lhs: Vec<Vec<RuleId>>,
    rule_by_ctor: HashMap<(TypeId, String), RuleId>,
}

/// Grammar text shipped with the crate, covering the SQL subset the
/// transpiler understands.
pub const BUNDLED_SQL_GRAMMAR: &str = include_str!("../data/sql.grammar");

impl Grammar {
    /// Parse a grammar from its textual form.
    ///
    /// The format is line oriented. `#` starts a comment. Declarations:
    ///
    /// ```text
    /// type <name> [terminal]
    /// rule <lhs> := Ctor(child, child) | OtherCtor | Empty()
    /// ```
    ///
    /// A constructor without parentheses (or with `()`) has no children.
    /// Ids are assigned in declaration order, so identical text always
    /// produces identical ids.
    pub fn parse(spec_text: &str) -> Result<Grammar, GrammarError> {
        let mut types: Vec<NodeType> = Vec::new();
        let mut type_by_name: HashMap<String, TypeId> = HashMap::new();
        // (line, lhs name, constructor, rhs names)
        let mut raw_rules: Vec<(usize, String, String, Vec<String>)> = Vec::new();

        for (idx, raw_line) in spec_text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("type ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| GrammarError::Syntax {
                    line: line_no,
                    msg: "missing type name".into(),
                })?;
                let kind = match parts.next() {
                    None => TypeKind::NonTerminal,
                    Some("terminal") => match name {
                        TERMINAL_TABLE => TypeKind::TerminalTable,
                        TERMINAL_COLUMN => TypeKind::TerminalColumn,
                        TERMINAL_TOKEN => TypeKind::TerminalToken,
                        other => {
                            return Err(GrammarError::BadTerminalName {
                                line: line_no,
                                name: other.to_string(),
                            })
                        }
                    },
                    Some(w) => {
                        return Err(GrammarError::Syntax {
                            line: line_no,
                            msg: format!("unexpected word `{w}` after type name"),
                        })
                    }
                };
                if type_by_name.contains_key(name) {
                    return Err(GrammarError::DuplicateType {
                        line: line_no,
                        name: name.to_string(),
                    });
                }
                let id = TypeId(types.len() as u32);
                type_by_name.insert(name.to_string(), id);
                types.push(NodeType {
                    name: name.to_string(),
                    kind,
                    type_index: id,
                });
            } else if let Some(rest) = line.strip_prefix("rule ") {
                let (lhs, rhs_text) = rest.split_once(":=").ok_or_else(|| GrammarError::Syntax {
                    line: line_no,
                    msg: "expected `:=` in rule".into(),
                })?;
                let lhs = lhs.trim().to_string();
                for alt in split_alternatives(rhs_text) {
                    let alt = alt.trim();
                    if alt.is_empty() {
                        return Err(GrammarError::Syntax {
                            line: line_no,
                            msg: "empty rule alternative".into(),
                        });
                    }
                    let (ctor, children) = parse_constructor(alt, line_no)?;
                    raw_rules.push((line_no, lhs.clone(), ctor, children));
                }
            } else {
                return Err(GrammarError::Syntax {
                    line: line_no,
                    msg: format!("expected `type` or `rule`, got `{line}`"),
                });
            }
        }

        let mut rules: Vec<Rule> = Vec::new();
        let mut rules_by_lhs: Vec<Vec<RuleId>> = vec![Vec::new(); types.len()];
        let mut rule_by_ctor: HashMap<(TypeId, String), RuleId> = HashMap::new();
        for (line_no, lhs_name, ctor, children) in raw_rules {
            let &lhs = type_by_name
                .get(&lhs_name)
                .ok_or_else(|| GrammarError::UndeclaredType {
                    line: line_no,
                    name: lhs_name.clone(),
                })?;
            if types[lhs.index()].kind != TypeKind::NonTerminal {
                return Err(GrammarError::TerminalOnLhs {
                    line: line_no,
                    name: lhs_name.clone(),
                });
            }
            let mut rhs = Vec::with_capacity(children.len());
            for child in children {
                let &cid =
                    type_by_name
                        .get(&child)
                        .ok_or_else(|| GrammarError::UndeclaredType {
                            line: line_no,
                            name: child.clone(),
                        })?;
                rhs.push(cid);
            }
            let id = RuleId(rules.len() as u32);
            if rule_by_ctor.insert((lhs, ctor.clone()), id).is_some() {
                return Err(GrammarError::DuplicateConstructor {
                    line: line_no,
                    ctor,
                    lhs: lhs_name,
                });
            }
            rules_by_lhs[lhs.index()].push(id);
            rules.push(Rule {
                rule_index: id,
                lhs,
                constructor: ctor,
                rhs,
            });
        }

        let root = *type_by_name.get(ROOT_TYPE).ok_or(GrammarError::MissingRoot)?;
        for t in &types {
            if t.kind == TypeKind::NonTerminal && rules_by_lhs[t.type_index.index()].is_empty() {
                return Err(GrammarError::EmptyNonTerminal {
                    name: t.name.clone(),
                });
            }
        }

        Ok(Grammar {
            types,
            rules,
            root,
            type_by_name,
            rules_by_lhs,
            rule_by_ctor,
        })
    }

    /// The grammar shipped with the crate.
    pub fn bundled() -> Grammar {
        Grammar::parse(BUNDLED_SQL_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn root_type(&self) -> TypeId {
        self.root
    }

    pub fn types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn node_type(&self, id: TypeId) -> &NodeType {
        &self.types[id.index()]
    }

    pub fn rule(&self, id: RuleId) -> &Rule {
        &self.rules[id.index()]
    }

    pub fn type_named(&self, name: &str) -> Option<TypeId> {
        self.type_by_name.get(name).copied()
    }

    /// Rule with the given constructor under `lhs`, if declared.
    pub fn rule_named(&self, lhs: TypeId, constructor: &str) -> Option<RuleId> {
        self.rule_by_ctor.get(&(lhs, constructor.to_string())).copied()
    }

    /// The legal `ApplyRule` actions for a non-terminal, in declaration order.
    pub fn rules_for_type(&self, t: TypeId) -> Result<&[RuleId], GrammarError> {
        if self.types[t.index()].kind != TypeKind::NonTerminal {
            return Err(GrammarError::NotANonTerminal {
                name: self.types[t.index()].name.clone(),
            });
        }
        Ok(&self.rules_by_lhs[t.index()])
    }

    pub fn is_terminal(&self, t: TypeId) -> bool {
        self.types[t.index()].kind != TypeKind::NonTerminal
    }

    pub fn kind(&self, t: TypeId) -> TypeKind {
        self.types[t.index()].kind
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.constructor)
    }
}

/// Split the right-hand side of a rule on `|`, ignoring pipes inside parens.
fn split_alternatives(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            '|' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn parse_constructor(alt: &str, line: usize) -> Result<(String, Vec<String>), GrammarError> {
    let bad = |msg: &str| GrammarError::Syntax {
        line,
        msg: msg.to_string(),
    };
    match alt.find('(') {
        None => {
            if !alt.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(bad(&format!("bad constructor name `{alt}`")));
            }
            Ok((alt.to_string(), Vec::new()))
        }
        Some(pos) => {
            let ctor = alt[..pos].trim();
            let rest = alt[pos + 1..]
                .strip_suffix(')')
                .ok_or_else(|| bad("missing closing `)`"))?;
            let children = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            Ok((ctor.to_string(), children))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_empty_rhs_alternatives() {
        let g = Grammar::parse("type sql\ntype order\nrule sql := S(order)\nrule order := Asc | Desc").unwrap();
        let order = g.type_named("order").unwrap();
        let rules = g.rules_for_type(order).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(g.rule(rules[0]).constructor, "Asc");
        assert_eq!(g.rule(rules[1]).constructor, "Desc");
        assert!(g.rule(rules[0]).rhs.is_empty());
        assert!(g.rule(rules[1]).rhs.is_empty());
    }

    #[test]
    fn parses_rhs_with_children() {
        let g = Grammar::parse(
            "type sql\ntype distinct\ntype col_unit\n\
             rule sql := S(distinct)\nrule distinct := T\nrule col_unit := U\n\
             rule sql := SelectOneColumn(distinct, col_unit)",
        )
        .unwrap();
        let sql = g.type_named("sql").unwrap();
        let r = g.rule_named(sql, "SelectOneColumn").unwrap();
        let rule = g.rule(r);
        assert_eq!(rule.rhs.len(), 2);
        assert_eq!(g.node_type(rule.rhs[0]).name, "distinct");
        assert_eq!(g.node_type(rule.rhs[1]).name, "col_unit");
    }

    #[test]
    fn rejects_terminal_on_lhs() {
        let err = Grammar::parse("type sql\ntype tab_id terminal\nrule sql := S\nrule tab_id := X()")
            .unwrap_err();
        assert!(matches!(err, GrammarError::TerminalOnLhs { .. }), "{err}");
    }

    #[test]
    fn rejects_undeclared_child() {
        let err = Grammar::parse("type sql\nrule sql := S(ghost)").unwrap_err();
        assert!(matches!(err, GrammarError::UndeclaredType { .. }), "{err}");
    }

    #[test]
    fn rejects_duplicate_constructor_within_lhs() {
        let err = Grammar::parse("type sql\nrule sql := S | S").unwrap_err();
        assert!(matches!(err, GrammarError::DuplicateConstructor { .. }), "{err}");
    }

    #[test]
    fn rejects_bad_terminal_name() {
        let err = Grammar::parse("type sql\ntype foo terminal\nrule sql := S").unwrap_err();
        assert!(matches!(err, GrammarError::BadTerminalName { .. }), "{err}");
    }

    #[test]
    fn reports_syntax_error_with_line() {
        let err = Grammar::parse("type sql\nrule sql S").unwrap_err();
        match err {
            GrammarError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ids_are_dense_and_deterministic() {
        let text = BUNDLED_SQL_GRAMMAR;
        let a = Grammar::parse(text).unwrap();
        let b = Grammar::parse(text).unwrap();
        for (ta, tb) in a.types().iter().zip(b.types()) {
            assert_eq!(ta.name, tb.name);
            assert_eq!(ta.type_index, tb.type_index);
        }
        for (ra, rb) in a.rules().iter().zip(b.rules()) {
            assert_eq!(ra.constructor, rb.constructor);
            assert_eq!(ra.rule_index, rb.rule_index);
        }
        for (i, t) in a.types().iter().enumerate() {
            assert_eq!(t.type_index.index(), i);
        }
        for (i, r) in a.rules().iter().enumerate() {
            assert_eq!(r.rule_index.index(), i);
        }
    }

    #[test]
    fn bundled_grammar_shape() {
        let g = Grammar::bundled();
        assert_eq!(g.node_type(g.root_type()).name, "sql");
        assert_eq!(g.types().len(), 16);
        assert_eq!(g.rules().len(), 76);

        let distinct = g.type_named("distinct").unwrap();
        let rules = g.rules_for_type(distinct).unwrap();
        assert_eq!(rules.len(), 2);
        assert_eq!(g.rule(rules[0]).constructor, "True");
        assert_eq!(g.rule(rules[1]).constructor, "False");

        let cmp = g.type_named("cmp_op").unwrap();
        assert_eq!(g.rules_for_type(cmp).unwrap().len(), 10);

        // Quantitative families run up to arity five.
        let select = g.type_named("select").unwrap();
        assert_eq!(g.rules_for_type(select).unwrap().len(), 5);
        let sel5 = g.rule_named(select, "SelectColumnFive").unwrap();
        assert_eq!(g.rule(sel5).rhs.len(), 6);

        // Empty-rhs rules attach no children.
        let order = g.type_named("order").unwrap();
        let asc = g.rule_named(order, "Asc").unwrap();
        assert!(g.rule(asc).rhs.is_empty());
    }

    #[test]
    fn singleton_grammar() {
        let g = Grammar::parse("type sql\nrule sql := OnlyRule()").unwrap();
        let rules = g.rules_for_type(g.root_type()).unwrap();
        assert_eq!(rules.len(), 1);
    }

    #[test]
    fn is_terminal_examples() {
        let g = Grammar::bundled();
        assert!(g.is_terminal(g.type_named("tok_id").unwrap()));
        assert!(!g.is_terminal(g.type_named("sql").unwrap()));
        assert!(!g.is_terminal(g.type_named("condition").unwrap()));
    }

    #[test]
    fn rules_for_type_rejects_terminal() {
        let g = Grammar::bundled();
        assert!(g.rules_for_type(g.type_named("tab_id").unwrap()).is_err());
    }

    #[test]
    fn rules_partition_by_lhs() {
        let g = Grammar::bundled();
        for r in g.rules() {
            let own = g.rules_for_type(r.lhs).unwrap();
            assert!(own.contains(&r.rule_index));
            for t in g.types() {
                if t.kind == TypeKind::NonTerminal && t.type_index != r.lhs {
                    assert!(!g.rules_for_type(t.type_index).unwrap().contains(&r.rule_index));
                }
            }
        }
    }
}
