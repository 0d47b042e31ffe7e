//! Typed abstract syntax trees built action-by-action, and the frontier
//! bookkeeping that decides which unexpanded node may be expanded next.
//!
//! Trees only grow: nodes are arena-allocated and never removed. A node is
//! created unexpanded by its parent's `ApplyRule` action and later expanded
//! by exactly one action of its own (token nodes take several `GenToken`
//! steps before the end marker completes them).

use std::collections::VecDeque;

use num_bigint::BigUint;
use rand::Rng;
use thiserror::Error;

use crate::grammar::{Grammar, GrammarError, RuleId, TypeId, TypeKind};

/// Arena index of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Vocabulary token id (the end marker is [`crate::vocab::EOS`]).
pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    None,
    Rule(RuleId),
    TableRef(usize),
    ColumnRef(usize),
    /// Finalized (or still-buffering) token list; the end marker itself is
    /// not stored.
    TokenList(Vec<TokenId>),
}

/// One of the three action families (tokens split generation from the end
/// marker, so the tagged union has four arms).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    ApplyRule(RuleId),
    SelectTable(usize),
    SelectColumn(usize),
    /// `GenToken` where the end marker is the reserved eos token id.
    GenToken(TokenId),
}

#[derive(Debug, Clone)]
pub struct AstNode {
    pub node_id: NodeId,
    pub node_type: TypeId,
    pub parent: Option<NodeId>,
    /// Rule whose application created this node.
    pub parent_rule: Option<RuleId>,
    pub depth: u16,
    /// Step at which this node finished expanding.
    pub timestamp: Option<u32>,
    /// First step that touched this node (differs from `timestamp` only for
    /// multi-token `tok_id` nodes).
    pub first_step: Option<u32>,
    pub payload: Payload,
    pub children: Vec<NodeId>,
    pub expanded: bool,
}

#[derive(Debug, Clone)]
pub struct Ast {
    nodes: Vec<AstNode>,
    root: NodeId,
    /// step -> node expanded (or buffered into) at that step.
    step_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Dfs,
    Bfs,
}

/// Stack (DFS) or FIFO queue (BFS) of sibling sets of unexpanded nodes.
///
/// Each entry holds the not-yet-expanded children of one node, in
/// left-to-right child order. `pinned` is a `tok_id` node mid-buffer that
/// must be chosen next regardless of the discipline.
#[derive(Debug, Clone)]
pub struct FrontierStructure {
    pub order: Order,
    sets: VecDeque<Vec<NodeId>>,
    pinned: Option<NodeId>,
}

#[derive(Debug, Error)]
pub enum AstError {
    #[error("node {0:?} is not a legal frontier candidate")]
    NotACandidate(NodeId),
    #[error("node {0:?} is already expanded")]
    AlreadyExpanded(NodeId),
    #[error("action {action:?} is incompatible with node type `{type_name}`")]
    IncompatibleAction { action: Action, type_name: String },
    #[error("rule lhs `{lhs}` does not match node type `{type_name}`")]
    RuleTypeMismatch { lhs: String, type_name: String },
    #[error("AST is not complete")]
    Incomplete,
    #[error("node {0:?} has no timestamp")]
    MissingTimestamp(NodeId),
    #[error("node {0:?} not in tree")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

impl FrontierStructure {
    fn new(order: Order, root: NodeId) -> Self {
        let mut sets = VecDeque::new();
        sets.push_back(vec![root]);
        FrontierStructure {
            order,
            sets,
            pinned: None,
        }
    }

    /// Nodes eligible for expansion right now, in left-to-right child order.
    /// Empty exactly when the AST is complete.
    pub fn candidates(&self) -> Vec<NodeId> {
        if let Some(p) = self.pinned {
            return vec![p];
        }
        match self.order {
            Order::Dfs => self.sets.back().cloned().unwrap_or_default(),
            Order::Bfs => self.sets.front().cloned().unwrap_or_default(),
        }
    }

    /// First element of [`Self::candidates`].
    pub fn leftmost_candidate(&self) -> Option<NodeId> {
        self.candidates().first().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.pinned.is_none() && self.sets.is_empty()
    }

    pub fn pinned(&self) -> Option<NodeId> {
        self.pinned
    }

    fn active_set_mut(&mut self) -> Option<&mut Vec<NodeId>> {
        match self.order {
            Order::Dfs => self.sets.back_mut(),
            Order::Bfs => self.sets.front_mut(),
        }
    }

    /// Remove an expanded node from the active set, dropping the set once
    /// exhausted.
    fn remove_active(&mut self, n: NodeId) {
        let set = self.active_set_mut().expect("active set exists");
        let pos = set.iter().position(|&x| x == n).expect("node in active set");
        set.remove(pos);
        if set.is_empty() {
            match self.order {
                Order::Dfs => self.sets.pop_back(),
                Order::Bfs => self.sets.pop_front(),
            };
        }
    }

    fn push_children(&mut self, children: Vec<NodeId>) {
        if !children.is_empty() {
            self.sets.push_back(children);
        }
    }
}

impl Ast {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &AstNode {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[AstNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of action steps applied so far (token buffering counts one
    /// step per token).
    pub fn steps(&self) -> usize {
        self.step_nodes.len()
    }

    pub fn node_of_step(&self, step: usize) -> NodeId {
        self.step_nodes[step]
    }

    pub fn step_nodes(&self) -> &[NodeId] {
        &self.step_nodes
    }

    pub fn is_complete(&self) -> bool {
        self.nodes.iter().all(|n| n.expanded)
    }

    fn add_node(
        &mut self,
        node_type: TypeId,
        parent: Option<NodeId>,
        parent_rule: Option<RuleId>,
        depth: u16,
    ) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(AstNode {
            node_id: id,
            node_type,
            parent,
            parent_rule,
            depth,
            timestamp: None,
            first_step: None,
            payload: Payload::None,
            children: Vec::new(),
            expanded: false,
        });
        id
    }
}

/// Direct construction of complete gold trees (no frontier, no
/// timestamps); used by the SQL parser and by test generators.
pub struct TreeBuilder<'g> {
    g: &'g Grammar,
    ast: Ast,
}

impl<'g> TreeBuilder<'g> {
    pub fn new(g: &'g Grammar) -> TreeBuilder<'g> {
        let mut ast = Ast {
            nodes: Vec::new(),
            root: NodeId(0),
            step_nodes: Vec::new(),
        };
        ast.add_node(g.root_type(), None, None, 0);
        TreeBuilder { g, ast }
    }

    pub fn root(&self) -> NodeId {
        self.ast.root
    }

    pub fn node_type(&self, n: NodeId) -> TypeId {
        self.ast.node(n).node_type
    }

    /// Expand a non-terminal with a rule, returning the created children in
    /// right-hand-side order.
    pub fn expand(&mut self, n: NodeId, rule: RuleId) -> Vec<NodeId> {
        let r = self.g.rule(rule);
        assert_eq!(r.lhs, self.ast.node(n).node_type, "rule lhs mismatch");
        assert!(!self.ast.node(n).expanded, "node already expanded");
        let depth = self.ast.node(n).depth + 1;
        let children: Vec<NodeId> = r
            .rhs
            .iter()
            .map(|&t| self.ast.add_node(t, Some(n), Some(rule), depth))
            .collect();
        let node = &mut self.ast.nodes[n.index()];
        node.payload = Payload::Rule(rule);
        node.expanded = true;
        node.children = children.clone();
        children
    }

    pub fn set_table(&mut self, n: NodeId, idx: usize) {
        let node = &mut self.ast.nodes[n.index()];
        node.payload = Payload::TableRef(idx);
        node.expanded = true;
    }

    pub fn set_column(&mut self, n: NodeId, idx: usize) {
        let node = &mut self.ast.nodes[n.index()];
        node.payload = Payload::ColumnRef(idx);
        node.expanded = true;
    }

    pub fn set_tokens(&mut self, n: NodeId, tokens: Vec<TokenId>) {
        let node = &mut self.ast.nodes[n.index()];
        node.payload = Payload::TokenList(tokens);
        node.expanded = true;
    }

    /// Finish the tree; panics if any node was left unexpanded.
    pub fn finish(self) -> Ast {
        assert!(self.ast.is_complete(), "tree builder left unexpanded nodes");
        self.ast
    }
}

/// Fresh tree holding a single unexpanded root of the grammar's root type.
pub fn new_ast(g: &Grammar, order: Order) -> (Ast, FrontierStructure) {
    let mut ast = Ast {
        nodes: Vec::new(),
        root: NodeId(0),
        step_nodes: Vec::new(),
    };
    let root = ast.add_node(g.root_type(), None, None, 0);
    let frontier = FrontierStructure::new(order, root);
    (ast, frontier)
}

/// Apply one action to frontier node `n` at step `j`. Returns ids of nodes
/// created by the action (non-empty only for `ApplyRule` with children).
pub fn apply_action(
    g: &Grammar,
    ast: &mut Ast,
    frontier: &mut FrontierStructure,
    n: NodeId,
    action: Action,
    j: u32,
) -> Result<Vec<NodeId>, AstError> {
    if !frontier.candidates().contains(&n) {
        return Err(AstError::NotACandidate(n));
    }
    if ast.node(n).expanded {
        return Err(AstError::AlreadyExpanded(n));
    }
    debug_assert_eq!(ast.steps(), j as usize, "steps must be applied in order");

    let node_type = ast.node(n).node_type;
    let kind = g.kind(node_type);
    let incompatible = || AstError::IncompatibleAction {
        action,
        type_name: g.node_type(node_type).name.clone(),
    };

    let mut created = Vec::new();
    match (kind, action) {
        (TypeKind::NonTerminal, Action::ApplyRule(r)) => {
            let rule = g.rule(r);
            if rule.lhs != node_type {
                return Err(AstError::RuleTypeMismatch {
                    lhs: g.node_type(rule.lhs).name.clone(),
                    type_name: g.node_type(node_type).name.clone(),
                });
            }
            let depth = ast.node(n).depth + 1;
            for &child_type in &rule.rhs {
                let c = ast.add_node(child_type, Some(n), Some(r), depth);
                created.push(c);
            }
            {
                let node = &mut ast.nodes[n.index()];
                node.payload = Payload::Rule(r);
                node.expanded = true;
                node.timestamp = Some(j);
                node.first_step = Some(j);
                node.children = created.clone();
            }
            frontier.remove_active(n);
            frontier.push_children(created.clone());
        }
        (TypeKind::TerminalTable, Action::SelectTable(i)) => {
            let node = &mut ast.nodes[n.index()];
            node.payload = Payload::TableRef(i);
            node.expanded = true;
            node.timestamp = Some(j);
            node.first_step = Some(j);
            frontier.remove_active(n);
        }
        (TypeKind::TerminalColumn, Action::SelectColumn(i)) => {
            let node = &mut ast.nodes[n.index()];
            node.payload = Payload::ColumnRef(i);
            node.expanded = true;
            node.timestamp = Some(j);
            node.first_step = Some(j);
            frontier.remove_active(n);
        }
        (TypeKind::TerminalToken, Action::GenToken(tok)) => {
            let node = &mut ast.nodes[n.index()];
            if node.first_step.is_none() {
                node.first_step = Some(j);
            }
            if tok == crate::vocab::EOS {
                if let Payload::None = node.payload {
                    node.payload = Payload::TokenList(Vec::new());
                }
                node.expanded = true;
                node.timestamp = Some(j);
                frontier.pinned = None;
                frontier.remove_active(n);
            } else {
                match &mut node.payload {
                    Payload::None => node.payload = Payload::TokenList(vec![tok]),
                    Payload::TokenList(buf) => buf.push(tok),
                    _ => unreachable!(),
                }
                frontier.pinned = Some(n);
            }
        }
        _ => return Err(incompatible()),
    }
    ast.step_nodes.push(n);
    Ok(created)
}

/// Where a step's relation row comes from (see the relations module).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOrigin {
    /// Root expansion, step 0.
    Root,
    /// Node whose parent was expanded at the given step.
    ChildOf(u32),
    /// Token buffering step on the same node as the given previous step.
    Continuation(u32),
}

impl StepOrigin {
    /// The parent step `p_j` (0 for the root, by convention).
    pub fn parent_step(self) -> u32 {
        match self {
            StepOrigin::Root => 0,
            StepOrigin::ChildOf(p) => p,
            StepOrigin::Continuation(_) => 0,
        }
    }
}

/// One decoding step of a traversal, with everything the decoder input
/// module and the relation builder need.
#[derive(Debug, Clone)]
pub struct TraversalStep {
    pub node: NodeId,
    pub node_type: TypeId,
    pub parent_rule: Option<RuleId>,
    pub depth: u16,
    pub action: Action,
    pub origin: StepOrigin,
}

/// A full valid traversal of a complete AST.
#[derive(Debug, Clone)]
pub struct TraversalRecord {
    pub order: Order,
    pub steps: Vec<TraversalStep>,
}

impl TraversalRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Gold actions a complete node answers with when chosen.
fn gold_actions(node: &AstNode) -> Vec<Action> {
    match &node.payload {
        Payload::Rule(r) => vec![Action::ApplyRule(*r)],
        Payload::TableRef(i) => vec![Action::SelectTable(*i)],
        Payload::ColumnRef(i) => vec![Action::SelectColumn(*i)],
        Payload::TokenList(toks) => {
            let mut acts: Vec<Action> = toks.iter().map(|&t| Action::GenToken(t)).collect();
            acts.push(Action::GenToken(crate::vocab::EOS));
            acts
        }
        Payload::None => panic!("gold AST has unexpanded node"),
    }
}

/// Shared walker for canonical recording and random sampling: re-traverses
/// a complete gold tree under the frontier discipline, choosing among
/// candidates with `choose`.
fn traverse_with<F>(
    gold: &Ast,
    g: &Grammar,
    order: Order,
    mut choose: F,
) -> Result<TraversalRecord, AstError>
where
    F: FnMut(&[NodeId]) -> usize,
{
    if !gold.is_complete() {
        return Err(AstError::Incomplete);
    }
    // Walk a shadow frontier over the gold tree's existing node ids.
    let mut frontier = FrontierStructure::new(order, gold.root());
    let mut steps = Vec::new();
    let mut expanded_at: Vec<Option<u32>> = vec![None; gold.len()];

    while !frontier.is_empty() {
        let cands = frontier.candidates();
        let pick = if frontier.pinned.is_some() || cands.len() == 1 {
            0
        } else {
            choose(&cands)
        };
        let n = cands[pick];
        let node = gold.node(n);
        let origin_parent = match node.parent {
            None => StepOrigin::Root,
            Some(p) => StepOrigin::ChildOf(expanded_at[p.index()].expect("parent expanded first")),
        };
        for (k, action) in gold_actions(node).into_iter().enumerate() {
            let j = steps.len() as u32;
            let origin = if k == 0 {
                origin_parent
            } else {
                StepOrigin::Continuation(j - 1)
            };
            steps.push(TraversalStep {
                node: n,
                node_type: node.node_type,
                parent_rule: node.parent_rule,
                depth: node.depth,
                action,
                origin,
            });
            match action {
                Action::ApplyRule(_) => {
                    expanded_at[n.index()] = Some(j);
                    frontier.remove_active(n);
                    frontier.push_children(node.children.clone());
                }
                Action::SelectTable(_) | Action::SelectColumn(_) => {
                    expanded_at[n.index()] = Some(j);
                    frontier.remove_active(n);
                }
                Action::GenToken(t) => {
                    if t == crate::vocab::EOS {
                        expanded_at[n.index()] = Some(j);
                        frontier.pinned = None;
                        frontier.remove_active(n);
                    } else {
                        frontier.pinned = Some(n);
                    }
                }
            }
        }
    }
    let _ = g;
    Ok(TraversalRecord { order, steps })
}

/// Canonical left-to-right traversal under the given discipline.
pub fn record_canonical_traversal(
    gold: &Ast,
    g: &Grammar,
    order: Order,
) -> Result<TraversalRecord, AstError> {
    traverse_with(gold, g, order, |_| 0)
}

/// Uniformly sampled traversal under the given discipline; deterministic
/// for a fixed rng state.
pub fn sample_traversal<R: Rng>(
    gold: &Ast,
    g: &Grammar,
    order: Order,
    rng: &mut R,
) -> Result<TraversalRecord, AstError> {
    traverse_with(gold, g, order, |cands| rng.gen_range(0..cands.len()))
}

/// Number of valid traversal paths of a complete AST: the product over all
/// nodes of `children count` factorial. The same count holds for the DFS
/// and the BFS discipline.
pub fn count_traversal_paths(ast: &Ast) -> Result<BigUint, AstError> {
    if !ast.is_complete() {
        return Err(AstError::Incomplete);
    }
    let mut total = BigUint::from(1u32);
    for node in ast.nodes() {
        let c = node.children.len();
        for k in 2..=c {
            total *= BigUint::from(k);
        }
    }
    Ok(total)
}

/// Replay a traversal record through `new_ast`/`apply_action`, validating
/// every step. Returns the reconstructed tree, which is isomorphic to the
/// gold tree the record was taken from.
pub fn replay(record: &TraversalRecord, gold: &Ast, g: &Grammar) -> Result<Ast, AstError> {
    let (mut ast, mut frontier) = new_ast(g, record.order);
    // gold node id -> replayed node id
    let mut twin: Vec<Option<NodeId>> = vec![None; gold.len()];
    twin[gold.root().index()] = Some(ast.root());
    for (j, step) in record.steps.iter().enumerate() {
        let target = twin[step.node.index()].ok_or(AstError::UnknownNode(step.node))?;
        let created = apply_action(g, &mut ast, &mut frontier, target, step.action, j as u32)?;
        if !created.is_empty() {
            let gold_children = &gold.node(step.node).children;
            debug_assert_eq!(gold_children.len(), created.len());
            for (gc, rc) in gold_children.iter().zip(created) {
                twin[gc.index()] = Some(rc);
            }
        }
    }
    if !frontier.is_empty() || !ast.is_complete() {
        return Err(AstError::Incomplete);
    }
    Ok(ast)
}

/// Structural equality over types, payloads and child order, ignoring ids
/// and timestamps.
pub fn isomorphic(a: &Ast, b: &Ast) -> bool {
    fn eq(a: &Ast, an: NodeId, b: &Ast, bn: NodeId) -> bool {
        let x = a.node(an);
        let y = b.node(bn);
        x.node_type == y.node_type
            && x.payload == y.payload
            && x.children.len() == y.children.len()
            && x.children
                .iter()
                .zip(&y.children)
                .all(|(&ca, &cb)| eq(a, ca, b, cb))
    }
    a.len() == b.len() && eq(a, a.root(), b, b.root())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::EOS;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_grammar() -> Grammar {
        // sql := FromSelect(from, select); from := FromOneTable(tab_id);
        // select := Sel(col_id)
        Grammar::parse(
            "type sql\ntype from\ntype select\n\
             type tab_id terminal\ntype col_id terminal\ntype tok_id terminal\n\
             rule sql := FromSelect(from, select)\n\
             rule from := FromOneTable(tab_id)\n\
             rule select := Sel(col_id)",
        )
        .unwrap()
    }

    fn rid(g: &Grammar, lhs: &str, ctor: &str) -> RuleId {
        g.rule_named(g.type_named(lhs).unwrap(), ctor).unwrap()
    }

    #[test]
    fn new_ast_has_single_root_candidate() {
        let g = Grammar::bundled();
        let (ast, f) = new_ast(&g, Order::Dfs);
        assert_eq!(ast.len(), 1);
        assert_eq!(f.candidates(), vec![ast.root()]);
        assert!(!ast.is_complete());
        assert_eq!(ast.node(ast.root()).depth, 0);
    }

    #[test]
    fn dfs_descends_while_bfs_stays_level() {
        let g = toy_grammar();
        for order in [Order::Dfs, Order::Bfs] {
            let (mut ast, mut f) = new_ast(&g, order);
            let root = ast.root();
            let kids = apply_action(
                &g,
                &mut ast,
                &mut f,
                root,
                Action::ApplyRule(rid(&g, "sql", "FromSelect")),
                0,
            )
            .unwrap();
            let (from, select) = (kids[0], kids[1]);
            assert_eq!(f.leftmost_candidate(), Some(from));
            let created = apply_action(
                &g,
                &mut ast,
                &mut f,
                from,
                Action::ApplyRule(rid(&g, "from", "FromOneTable")),
                1,
            )
            .unwrap();
            let tab = created[0];
            match order {
                Order::Dfs => assert_eq!(f.candidates(), vec![tab]),
                Order::Bfs => assert_eq!(f.candidates(), vec![select]),
            }
        }
    }

    #[test]
    fn gen_token_buffers_until_end_marker() {
        let g = Grammar::parse(
            "type sql\ntype tok_id terminal\nrule sql := Lit(tok_id)",
        )
        .unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let root = ast.root();
        let kids =
            apply_action(&g, &mut ast, &mut f, root, Action::ApplyRule(RuleId(0)), 0).unwrap();
        let tok = kids[0];
        apply_action(&g, &mut ast, &mut f, tok, Action::GenToken(7), 1).unwrap();
        // Mid-buffer the node is pinned and still unexpanded.
        assert_eq!(f.candidates(), vec![tok]);
        assert!(!ast.node(tok).expanded);
        apply_action(&g, &mut ast, &mut f, tok, Action::GenToken(EOS), 2).unwrap();
        assert!(ast.node(tok).expanded);
        assert_eq!(ast.node(tok).payload, Payload::TokenList(vec![7]));
        assert_eq!(ast.node(tok).first_step, Some(1));
        assert_eq!(ast.node(tok).timestamp, Some(2));
        assert!(f.is_empty());
        assert!(ast.is_complete());
        assert!(f.candidates().is_empty());
    }

    #[test]
    fn rejects_bad_actions() {
        let g = toy_grammar();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let root = ast.root();
        // Wrong family for a non-terminal.
        let err = apply_action(&g, &mut ast, &mut f, root, Action::SelectTable(0), 0).unwrap_err();
        assert!(matches!(err, AstError::IncompatibleAction { .. }));
        // Rule of another lhs.
        let err = apply_action(
            &g,
            &mut ast,
            &mut f,
            root,
            Action::ApplyRule(rid(&g, "from", "FromOneTable")),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, AstError::RuleTypeMismatch { .. }));
        // Non-candidate node.
        let kids = apply_action(
            &g,
            &mut ast,
            &mut f,
            root,
            Action::ApplyRule(rid(&g, "sql", "FromSelect")),
            0,
        )
        .unwrap();
        let select = kids[1];
        let err =
            apply_action(&g, &mut ast, &mut f, select, Action::ApplyRule(rid(&g, "select", "Sel")), 1)
                .unwrap_err();
        assert!(matches!(err, AstError::NotACandidate(_)));
    }

    fn complete_toy(g: &Grammar) -> Ast {
        let (mut ast, mut f) = new_ast(g, Order::Dfs);
        let root = ast.root();
        let kids = apply_action(g, &mut ast, &mut f, root, Action::ApplyRule(rid(g, "sql", "FromSelect")), 0)
            .unwrap();
        let tab = apply_action(g, &mut ast, &mut f, kids[0], Action::ApplyRule(rid(g, "from", "FromOneTable")), 1)
            .unwrap()[0];
        apply_action(g, &mut ast, &mut f, tab, Action::SelectTable(0), 2).unwrap();
        let col = apply_action(g, &mut ast, &mut f, kids[1], Action::ApplyRule(rid(g, "select", "Sel")), 3)
            .unwrap()[0];
        apply_action(g, &mut ast, &mut f, col, Action::SelectColumn(2), 4).unwrap();
        assert!(ast.is_complete());
        ast
    }

    #[test]
    fn path_count_of_chain_is_one() {
        let g = toy_grammar();
        let ast = complete_toy(&g);
        // Only the root has two children.
        assert_eq!(count_traversal_paths(&ast).unwrap(), BigUint::from(2u32));

        let g2 = Grammar::parse("type sql\nrule sql := A(sql) | B").unwrap();
        let (mut ast, mut f) = new_ast(&g2, Order::Dfs);
        let mut cur = ast.root();
        for j in 0..2 {
            cur = apply_action(&g2, &mut ast, &mut f, cur, Action::ApplyRule(RuleId(0)), j).unwrap()[0];
        }
        apply_action(&g2, &mut ast, &mut f, cur, Action::ApplyRule(RuleId(1)), 2).unwrap();
        assert_eq!(count_traversal_paths(&ast).unwrap(), BigUint::from(1u32));
    }

    /// Brute-force enumeration of every traversal order (node granularity).
    fn enumerate_paths(gold: &Ast, order: Order) -> usize {
        fn go(gold: &Ast, f: &FrontierStructure, done: usize) -> usize {
            if f.is_empty() {
                return 1;
            }
            let mut total = 0;
            for n in f.candidates() {
                let mut f2 = f.clone();
                let node = gold.node(n);
                match &node.payload {
                    Payload::Rule(_) => {
                        f2.remove_active(n);
                        f2.push_children(node.children.clone());
                    }
                    _ => f2.remove_active(n),
                }
                total += go(gold, &f2, done + 1);
            }
            total
        }
        let f = FrontierStructure::new(order, gold.root());
        go(gold, &f, 0)
    }

    #[test]
    fn path_count_matches_enumeration() {
        // Root with two children, each with two leaf children: 2!·2!·2! = 8.
        let g = Grammar::parse(
            "type sql\ntype a\ntype tab_id terminal\n\
             rule sql := R(a, a)\nrule a := P(tab_id, tab_id)",
        )
        .unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let root = ast.root();
        let dd = apply_action(&g, &mut ast, &mut f, root, Action::ApplyRule(RuleId(0)), 0).unwrap();
        let mut j = 1;
        for d in dd {
            let leaves = apply_action(&g, &mut ast, &mut f, d, Action::ApplyRule(RuleId(1)), j).unwrap();
            j += 1;
            for leaf in leaves {
                apply_action(&g, &mut ast, &mut f, leaf, Action::SelectTable(0), j).unwrap();
                j += 1;
            }
        }
        let expected = count_traversal_paths(&ast).unwrap();
        assert_eq!(expected, BigUint::from(8u32));
        assert_eq!(BigUint::from(enumerate_paths(&ast, Order::Dfs)), expected);
        assert_eq!(BigUint::from(enumerate_paths(&ast, Order::Bfs)), expected);
    }

    #[test]
    fn canonical_record_replays_and_orders() {
        let g = toy_grammar();
        let gold = complete_toy(&g);
        for order in [Order::Dfs, Order::Bfs] {
            let rec = record_canonical_traversal(&gold, &g, order).unwrap();
            assert_eq!(rec.len(), 5);
            let rebuilt = replay(&rec, &gold, &g).unwrap();
            assert!(isomorphic(&gold, &rebuilt));
            // A node's step strictly exceeds its parent's step.
            for (j, s) in rec.steps.iter().enumerate() {
                if let StepOrigin::ChildOf(p) = s.origin {
                    assert!((p as usize) < j);
                }
            }
        }
        // BFS expands select before descending to tab_id.
        let rec = record_canonical_traversal(&gold, &g, Order::Bfs).unwrap();
        let names: Vec<&str> = rec
            .steps
            .iter()
            .map(|s| g.node_type(s.node_type).name.as_str())
            .collect();
        assert_eq!(names, vec!["sql", "from", "select", "tab_id", "col_id"]);
    }

    #[test]
    fn root_only_record_has_self_parent() {
        let g = Grammar::parse("type sql\nrule sql := Leaf").unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let root = ast.root();
        apply_action(&g, &mut ast, &mut f, root, Action::ApplyRule(RuleId(0)), 0).unwrap();
        let rec = record_canonical_traversal(&ast, &g, Order::Dfs).unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec.steps[0].origin, StepOrigin::Root);
        assert_eq!(rec.steps[0].origin.parent_step(), 0);
    }

    #[test]
    fn sampling_is_uniform_and_valid() {
        let g = Grammar::parse(
            "type sql\ntype tab_id terminal\nrule sql := R(tab_id, tab_id)",
        )
        .unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let root = ast.root();
        let kids = apply_action(&g, &mut ast, &mut f, root, Action::ApplyRule(RuleId(0)), 0).unwrap();
        apply_action(&g, &mut ast, &mut f, kids[0], Action::SelectTable(0), 1).unwrap();
        apply_action(&g, &mut ast, &mut f, kids[1], Action::SelectTable(1), 2).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut left_first = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let rec = sample_traversal(&ast, &g, Order::Dfs, &mut rng).unwrap();
            if rec.steps[1].node == kids[0] {
                left_first += 1;
            }
            let rebuilt = replay(&rec, &ast, &g).unwrap();
            assert!(isomorphic(&ast, &rebuilt));
        }
        let freq = left_first as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "freq {freq}");
    }

    #[test]
    fn sampling_on_single_path_tree_matches_canonical() {
        let g = toy_grammar();
        // Make a tree with path count 1 by using one-child rules only.
        let g1 = Grammar::parse(
            "type sql\ntype tab_id terminal\nrule sql := One(tab_id)",
        )
        .unwrap();
        let (mut ast, mut f) = new_ast(&g1, Order::Dfs);
        let root = ast.root();
        let k = apply_action(&g1, &mut ast, &mut f, root, Action::ApplyRule(RuleId(0)), 0).unwrap();
        apply_action(&g1, &mut ast, &mut f, k[0], Action::SelectTable(0), 1).unwrap();
        let canonical = record_canonical_traversal(&ast, &g1, Order::Dfs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let rec = sample_traversal(&ast, &g1, Order::Dfs, &mut rng).unwrap();
            let same = rec
                .steps
                .iter()
                .zip(&canonical.steps)
                .all(|(a, b)| a.node == b.node && a.action == b.action);
            assert!(same);
        }
        let _ = g;
    }

    #[test]
    fn dfs_subtree_property() {
        // Between a node's expansion and the completion of its subtree, no
        // outside node is expanded.
        let g = Grammar::bundled();
        let gold = crate::sql::tests_support::parse_demo_sql(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rec = sample_traversal(&gold, &g, Order::Dfs, &mut rng).unwrap();
            // For each node, collect the span of steps of its subtree; the
            // span must be contiguous.
            let mut step_of_node = vec![Vec::new(); gold.len()];
            for (j, s) in rec.steps.iter().enumerate() {
                step_of_node[s.node.index()].push(j);
            }
            fn subtree_steps(gold: &Ast, n: NodeId, step_of_node: &[Vec<usize>], out: &mut Vec<usize>) {
                out.extend_from_slice(&step_of_node[n.index()]);
                for &c in &gold.node(n).children {
                    subtree_steps(gold, c, step_of_node, out);
                }
            }
            for node in gold.nodes() {
                let mut steps = Vec::new();
                subtree_steps(&gold, node.node_id, &step_of_node, &mut steps);
                let min = *steps.iter().min().unwrap();
                let max = *steps.iter().max().unwrap();
                assert_eq!(max - min + 1, steps.len(), "subtree steps not contiguous");
            }
        }
    }
}
