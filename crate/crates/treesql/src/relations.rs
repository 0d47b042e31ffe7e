//! Pairwise tree relations between decoding steps.
//!
//! The relation between two expanded nodes is the pair of clamped distances
//! from their lowest common ancestor to each node. During training the full
//! matrix is computed once from the gold tree; during inference each step's
//! relation set is extended incrementally from earlier sets, which this
//! module verifies to be exactly equivalent.

use thiserror::Error;

use crate::ast::{Ast, NodeId, StepOrigin, TraversalRecord};

/// `(clamp(dist to query node), clamp(dist to key node))`, both measured
/// from the pair's lowest common ancestor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RelationTuple {
    pub to_query: u16,
    pub to_key: u16,
}

impl RelationTuple {
    pub const SELF: RelationTuple = RelationTuple { to_query: 0, to_key: 0 };

    pub fn new(to_query: u16, to_key: u16) -> Self {
        RelationTuple { to_query, to_key }
    }

    pub fn reversed(self) -> Self {
        RelationTuple {
            to_query: self.to_key,
            to_key: self.to_query,
        }
    }
}

/// Relations from step `j` to every step `i <= j`.
#[derive(Debug, Clone)]
pub struct RelationSet {
    pub step: u32,
    /// `entries[i]` relates step `j` (query) to step `i` (key);
    /// `entries[j]` is always `(0, 0)`.
    pub entries: Vec<RelationTuple>,
}

/// Full square matrix of relations over the steps of one traversal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    pub size: usize,
    data: Vec<RelationTuple>,
}

impl RelationMatrix {
    pub fn get(&self, j: usize, i: usize) -> RelationTuple {
        self.data[j * self.size + i]
    }

    /// Permute rows and columns by `perm`, where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> RelationMatrix {
        assert_eq!(perm.len(), self.size);
        let mut data = Vec::with_capacity(self.data.len());
        for &j in perm {
            for &i in perm {
                data.push(self.get(j, i));
            }
        }
        RelationMatrix { size: self.size, data }
    }

    /// Row `j` truncated to columns `0..=j`, as an incremental set would
    /// produce it.
    pub fn row_prefix(&self, j: usize) -> Vec<RelationTuple> {
        (0..=j).map(|i| self.get(j, i)).collect()
    }
}

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("node {0:?} not in tree")]
    UnknownNode(NodeId),
    #[error("clamp bound R must be >= 1, got {0}")]
    BadClamp(usize),
    #[error("incremental sets cover {have} steps but step {want} was requested")]
    MissingPrerequisite { have: usize, want: usize },
    #[error("record has {record} steps but the tree produced {ast}")]
    InconsistentRecord { record: usize, ast: usize },
    #[error("tuple component {0} out of range for R={1}")]
    OutOfRange(u16, usize),
}

/// Lowest common ancestor of `a` and `b` plus the edge-count distances from
/// it to each node. Parent-pointer walk with depth alignment; trees here
/// are small enough that no preprocessing is worth it.
pub fn lca_and_dists(ast: &Ast, a: NodeId, b: NodeId) -> Result<(NodeId, usize, usize), RelationError> {
    if a.index() >= ast.len() {
        return Err(RelationError::UnknownNode(a));
    }
    if b.index() >= ast.len() {
        return Err(RelationError::UnknownNode(b));
    }
    let (mut x, mut y) = (a, b);
    let (mut dx, mut dy) = (0usize, 0usize);
    while ast.node(x).depth > ast.node(y).depth {
        x = ast.node(x).parent.expect("deeper node has parent");
        dx += 1;
    }
    while ast.node(y).depth > ast.node(x).depth {
        y = ast.node(y).parent.expect("deeper node has parent");
        dy += 1;
    }
    while x != y {
        x = ast.node(x).parent.expect("nodes share a root");
        y = ast.node(y).parent.expect("nodes share a root");
        dx += 1;
        dy += 1;
    }
    Ok((x, dx, dy))
}

fn clamp(d: usize, r: usize) -> u16 {
    d.min(r) as u16
}

/// Relation tuple between the query node `j_node` and key node `i_node`.
pub fn relation(
    ast: &Ast,
    j_node: NodeId,
    i_node: NodeId,
    r: usize,
) -> Result<RelationTuple, RelationError> {
    if r < 1 {
        return Err(RelationError::BadClamp(r));
    }
    let (_, dj, di) = lca_and_dists(ast, j_node, i_node)?;
    Ok(RelationTuple::new(clamp(dj, r), clamp(di, r)))
}

/// Full relation matrix over the steps of a traversal record. Steps that
/// touch the same node (token buffering) relate as `(0, 0)`.
pub fn full_relation_matrix(
    record: &TraversalRecord,
    ast: &Ast,
    r: usize,
) -> Result<RelationMatrix, RelationError> {
    if r < 1 {
        return Err(RelationError::BadClamp(r));
    }
    let n = record.len();
    let nodes: Vec<NodeId> = record.steps.iter().map(|s| s.node).collect();
    if nodes.iter().any(|id| id.index() >= ast.len()) {
        return Err(RelationError::InconsistentRecord {
            record: n,
            ast: ast.len(),
        });
    }
    let mut data = vec![RelationTuple::SELF; n * n];
    for j in 0..n {
        for i in 0..j {
            let t = relation(ast, nodes[j], nodes[i], r)?;
            data[j * n + i] = t;
            data[i * n + j] = t.reversed();
        }
    }
    Ok(RelationMatrix { size: n, data })
}

/// Build the relation set of step `j` from the sets of steps `< j`.
///
/// Three rules, splitting the columns around the parent step `p`:
/// - the diagonal entry is `(0, 0)`;
/// - for `i <= p`, the parent's entry `(k, s)` lifts to `(clamp(k+1), s)`;
/// - for `p < i < j`, the counterpart entry `(k, s)` of step `i` against
///   the parent flips to `(clamp(s+1), k)`.
///
/// A token-buffering continuation step shares its node with the previous
/// step, so its row is a copy of that row plus the new diagonal.
pub fn extend_incremental(
    prev: &[RelationSet],
    origin: StepOrigin,
    r: usize,
) -> Result<RelationSet, RelationError> {
    if r < 1 {
        return Err(RelationError::BadClamp(r));
    }
    let j = prev.len();
    let lift = |d: u16| -> u16 { clamp(d as usize + 1, r) };
    let mut entries = Vec::with_capacity(j + 1);
    match origin {
        StepOrigin::Root => {
            if j != 0 {
                return Err(RelationError::MissingPrerequisite { have: j, want: 0 });
            }
        }
        StepOrigin::ChildOf(p) => {
            let p = p as usize;
            if p >= j {
                return Err(RelationError::MissingPrerequisite { have: j, want: p });
            }
            let parent_row = &prev[p].entries;
            for i in 0..=p {
                let t = parent_row[i];
                entries.push(RelationTuple::new(lift(t.to_query), t.to_key));
            }
            for set in prev.iter().take(j).skip(p + 1) {
                let counterpart = set.entries[p];
                entries.push(RelationTuple::new(lift(counterpart.to_key), counterpart.to_query));
            }
        }
        StepOrigin::Continuation(prev_step) => {
            let ps = prev_step as usize;
            if ps + 1 != j {
                return Err(RelationError::MissingPrerequisite { have: j, want: ps });
            }
            entries.extend_from_slice(&prev[ps].entries);
            // Same node as the previous step.
            entries.push(RelationTuple::SELF);
            entries[ps] = RelationTuple::SELF;
        }
    }
    if entries.len() == j {
        entries.push(RelationTuple::SELF);
    } else {
        debug_assert_eq!(entries.len(), j + 1);
        entries[j] = RelationTuple::SELF;
    }
    Ok(RelationSet {
        step: j as u32,
        entries,
    })
}

/// Run [`extend_incremental`] over a whole record.
pub fn incremental_sets(record: &TraversalRecord, r: usize) -> Result<Vec<RelationSet>, RelationError> {
    let mut sets: Vec<RelationSet> = Vec::with_capacity(record.len());
    for step in &record.steps {
        let next = extend_incremental(&sets, step.origin, r)?;
        sets.push(next);
    }
    Ok(sets)
}

/// Row-major index of a tuple in a `(R+1)^2` embedding table.
pub fn tuple_to_index(t: RelationTuple, r: usize) -> Result<usize, RelationError> {
    if t.to_query as usize > r {
        return Err(RelationError::OutOfRange(t.to_query, r));
    }
    if t.to_key as usize > r {
        return Err(RelationError::OutOfRange(t.to_key, r));
    }
    Ok(t.to_query as usize * (r + 1) + t.to_key as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{apply_action, new_ast, record_canonical_traversal, Action, Order};
    use crate::grammar::{Grammar, RuleId};

    /// Chain of `depth` one-child expansions ending in a table leaf.
    fn chain(depth: usize) -> (Grammar, Ast) {
        let g = Grammar::parse("type sql\ntype tab_id terminal\nrule sql := A(sql) | L(tab_id)").unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let mut cur = ast.root();
        for j in 0..depth {
            cur = apply_action(&g, &mut ast, &mut f, cur, Action::ApplyRule(RuleId(0)), j as u32)
                .unwrap()[0];
        }
        let leaf = apply_action(&g, &mut ast, &mut f, cur, Action::ApplyRule(RuleId(1)), depth as u32)
            .unwrap()[0];
        apply_action(&g, &mut ast, &mut f, leaf, Action::SelectTable(0), depth as u32 + 1).unwrap();
        (g, ast)
    }

    #[test]
    fn lca_basic_shapes() {
        let (_, ast) = chain(3);
        let root = ast.root();
        let child = ast.node(root).children[0];
        assert_eq!(lca_and_dists(&ast, root, root).unwrap(), (root, 0, 0));
        assert_eq!(lca_and_dists(&ast, child, root).unwrap(), (root, 1, 0));

        let g = Grammar::parse("type sql\ntype tab_id terminal\nrule sql := R(tab_id, tab_id)").unwrap();
        let (mut ast, mut f) = new_ast(&g, Order::Dfs);
        let r = ast.root();
        let kids = apply_action(&g, &mut ast, &mut f, r, Action::ApplyRule(RuleId(0)), 0).unwrap();
        apply_action(&g, &mut ast, &mut f, kids[0], Action::SelectTable(0), 1).unwrap();
        apply_action(&g, &mut ast, &mut f, kids[1], Action::SelectTable(1), 2).unwrap();
        assert_eq!(lca_and_dists(&ast, kids[0], kids[1]).unwrap(), (r, 1, 1));
    }

    #[test]
    fn relation_clamps_and_reverses() {
        let (_, ast) = chain(5);
        // Node at depth 5 vs node at depth 2 under R=4: raw (3, 0) from
        // their LCA (the depth-2 node itself).
        let mut cur = ast.root();
        let mut by_depth = vec![cur];
        while let Some(&c) = ast.node(cur).children.first() {
            by_depth.push(c);
            cur = c;
        }
        let deep = by_depth[5];
        let mid = by_depth[2];
        let t = relation(&ast, deep, mid, 4).unwrap();
        assert_eq!(t, RelationTuple::new(3, 0));
        assert_eq!(relation(&ast, mid, deep, 4).unwrap(), t.reversed());
        // Raw distances (5, 2) clamp to (4, 2) at R=4.
        let top = by_depth[0];
        let d5 = by_depth[5];
        let (_, dj, di) = lca_and_dists(&ast, d5, top).unwrap();
        assert_eq!((dj, di), (5, 0));
        let deep_vs_depth2_lca = relation(&ast, d5, by_depth[6], 4).unwrap();
        assert_eq!(deep_vs_depth2_lca, RelationTuple::new(1, 0));
        assert_eq!(relation(&ast, d5, top, 4).unwrap(), RelationTuple::new(4, 0));
    }

    #[test]
    fn tuple_index_is_row_major() {
        assert_eq!(tuple_to_index(RelationTuple::new(0, 0), 4).unwrap(), 0);
        assert_eq!(tuple_to_index(RelationTuple::new(4, 4), 4).unwrap(), 24);
        assert_eq!(tuple_to_index(RelationTuple::new(1, 0), 4).unwrap(), 5);
        assert!(tuple_to_index(RelationTuple::new(5, 0), 4).is_err());
        // Bijective over the domain.
        let mut seen = std::collections::HashSet::new();
        for q in 0..=4u16 {
            for k in 0..=4u16 {
                assert!(seen.insert(tuple_to_index(RelationTuple::new(q, k), 4).unwrap()));
            }
        }
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn matrix_diagonal_and_pairwise_oracle() {
        let g = Grammar::bundled();
        let ast = crate::sql::tests_support::parse_demo_sql(&g);
        let rec = record_canonical_traversal(&ast, &g, Order::Dfs).unwrap();
        let m = full_relation_matrix(&rec, &ast, 4).unwrap();
        for j in 0..m.size {
            assert_eq!(m.get(j, j), RelationTuple::SELF);
            for i in 0..m.size {
                let want = relation(&ast, rec.steps[j].node, rec.steps[i].node, 4).unwrap();
                assert_eq!(m.get(j, i), want);
                assert_eq!(m.get(i, j), want.reversed());
            }
        }
    }

    #[test]
    fn permuting_matrix_permutes_both_dims() {
        let g = Grammar::bundled();
        let ast = crate::sql::tests_support::parse_demo_sql(&g);
        let rec = record_canonical_traversal(&ast, &g, Order::Dfs).unwrap();
        let m = full_relation_matrix(&rec, &ast, 4).unwrap();
        let perm: Vec<usize> = (0..m.size).rev().collect();
        let p = m.permuted(&perm);
        for j in 0..m.size {
            for i in 0..m.size {
                assert_eq!(p.get(j, i), m.get(perm[j], perm[i]));
            }
        }
    }

    #[test]
    fn incremental_rules() {
        // Root only.
        let s0 = extend_incremental(&[], StepOrigin::Root, 4).unwrap();
        assert_eq!(s0.entries, vec![RelationTuple::SELF]);
        // Child right after parent: entry to parent is (1, 0).
        let s1 = extend_incremental(&[s0.clone()], StepOrigin::ChildOf(0), 4).unwrap();
        assert_eq!(s1.entries[0], RelationTuple::new(1, 0));
        assert_eq!(s1.entries[1], RelationTuple::SELF);
        // Sibling of step 1: (1, 1) to it, (1, 0) to the root.
        let s2 = extend_incremental(&[s0, s1], StepOrigin::ChildOf(0), 4).unwrap();
        assert_eq!(s2.entries[0], RelationTuple::new(1, 0));
        assert_eq!(s2.entries[1], RelationTuple::new(1, 1));
    }

    #[test]
    fn online_matches_offline_on_demo() {
        let g = Grammar::bundled();
        let ast = crate::sql::tests_support::parse_demo_sql(&g);
        for order in [Order::Dfs, Order::Bfs] {
            let rec = record_canonical_traversal(&ast, &g, order).unwrap();
            let m = full_relation_matrix(&rec, &ast, 4).unwrap();
            let sets = incremental_sets(&rec, 4).unwrap();
            for (j, set) in sets.iter().enumerate() {
                assert_eq!(set.entries, m.row_prefix(j), "step {j} under {order:?}");
            }
        }
    }

    #[test]
    fn clamp_monotone_in_r() {
        let (_, ast) = chain(6);
        let nodes: Vec<NodeId> = ast.nodes().iter().map(|n| n.node_id).collect();
        for &a in &nodes {
            for &b in &nodes {
                let small = relation(&ast, a, b, 3).unwrap();
                let big = relation(&ast, a, b, 6).unwrap();
                if big.to_query <= 3 && big.to_key <= 3 {
                    assert_eq!(small, big);
                }
            }
        }
    }
}
