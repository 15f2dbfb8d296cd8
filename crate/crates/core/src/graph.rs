//! Exnet DAG representation.
//!
//! An exnet is a single-rooted DAG in which every internal vertex owns two
//! ordered child slots. Each slot is an arc with its own [`ArcId`], so a
//! vertex whose two slots point at the same child still has two distinct
//! arcs (and therefore two complementary propagators).

use std::collections::VecDeque;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArcId(pub u32);

impl VertexId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ArcId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl fmt::Display for ArcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Which child slot of its source an arc occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    #[inline]
    pub fn slot(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    #[inline]
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc {
    pub src: VertexId,
    pub dst: VertexId,
    pub side: Side,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("vertex {0} does not exist")]
    UnknownVertex(VertexId),
    #[error("arc {0} does not exist")]
    UnknownArc(ArcId),
    #[error("{child} is not a child of {parent}")]
    NotAChild { parent: VertexId, child: VertexId },
    #[error("child slot {side:?} of {vertex} is already filled")]
    SlotTaken { vertex: VertexId, side: Side },
    #[error("leaf order must list every leaf exactly once")]
    BadLeafOrder,
    #[error("input graph contains a cycle")]
    Cyclic,
    #[error("input graph has {0} roots, expected exactly one")]
    RootCount(usize),
    #[error("input graph is empty")]
    Empty,
    #[error("graph is not a valid exnet: {0}")]
    Invalid(ValidationReport),
}

/// A validation rule that a graph may break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    Acyclic,
    SingleRoot,
    BinaryChildren,
    ParentChildConsistency,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Acyclic => "acyclic",
            Rule::SingleRoot => "single-root",
            Rule::BinaryChildren => "binary-children",
            Rule::ParentChildConsistency => "parent-child-consistency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Offender {
    Vertex(VertexId),
    Arc(ArcId),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<(Rule, Offender)>,
}

impl ValidationReport {
    pub fn valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|(r, _)| *r == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid() {
            return f.write_str("valid");
        }
        for (i, (rule, who)) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match who {
                Offender::Vertex(v) => write!(f, "{} at {v}", rule.name())?,
                Offender::Arc(a) => write!(f, "{} at {a}", rule.name())?,
            }
        }
        Ok(())
    }
}

/// An exnet graph. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExnetGraph {
    slots: Vec<[Option<ArcId>; 2]>,
    arcs: Vec<Arc>,
    parents: Vec<Vec<ArcId>>,
    root: VertexId,
    leaves: Vec<VertexId>,
    up: Vec<VertexId>,
    down: Vec<VertexId>,
    validated: bool,
}

/// Incremental constructor for [`ExnetGraph`].
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    slots: Vec<[Option<ArcId>; 2]>,
    arcs: Vec<Arc>,
    leaf_order: Option<Vec<VertexId>>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vertex_count(&self) -> usize {
        self.slots.len()
    }

    pub fn add_vertex(&mut self) -> VertexId {
        self.slots.push([None, None]);
        VertexId((self.slots.len() - 1) as u32)
    }

    fn check(&self, v: VertexId) -> Result<(), GraphError> {
        if v.index() < self.slots.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownVertex(v))
        }
    }

    /// Fills one child slot of `parent`.
    pub fn set_child(&mut self, parent: VertexId, side: Side, child: VertexId) -> Result<ArcId, GraphError> {
        self.check(parent)?;
        self.check(child)?;
        if self.slots[parent.index()][side.slot()].is_some() {
            return Err(GraphError::SlotTaken { vertex: parent, side });
        }
        let id = ArcId(self.arcs.len() as u32);
        self.arcs.push(Arc { src: parent, dst: child, side });
        self.slots[parent.index()][side.slot()] = Some(id);
        Ok(id)
    }

    /// Fills both child slots of `parent`, returning (left arc, right arc).
    pub fn connect(&mut self, parent: VertexId, left: VertexId, right: VertexId) -> Result<(ArcId, ArcId), GraphError> {
        let l = self.set_child(parent, Side::Left, left)?;
        let r = self.set_child(parent, Side::Right, right)?;
        Ok((l, r))
    }

    /// Overrides the default (ascending id) order of the leaves.
    pub fn set_leaf_order(&mut self, order: Vec<VertexId>) {
        self.leaf_order = Some(order);
    }

    /// Builds without validating the exnet rules. Only referential
    /// integrity and the leaf order are checked.
    pub fn build_unchecked(self) -> Result<ExnetGraph, GraphError> {
        let n = self.slots.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut parents = vec![Vec::new(); n];
        for (i, arc) in self.arcs.iter().enumerate() {
            parents[arc.dst.index()].push(ArcId(i as u32));
        }
        let natural: Vec<VertexId> =
            (0..n).filter(|&i| self.slots[i].iter().all(Option::is_none)).map(|i| VertexId(i as u32)).collect();
        let leaves = match self.leaf_order {
            None => natural,
            Some(order) => {
                let mut a = order.clone();
                a.sort();
                a.dedup();
                if a.len() != order.len() || a != natural {
                    return Err(GraphError::BadLeafOrder);
                }
                order
            }
        };
        let root = (0..n).find(|&i| parents[i].is_empty()).map(|i| VertexId(i as u32)).unwrap_or(VertexId(0));
        let mut g = ExnetGraph {
            slots: self.slots,
            arcs: self.arcs,
            parents,
            root,
            leaves,
            up: Vec::new(),
            down: Vec::new(),
            validated: false,
        };
        g.up = g.compute_up_order();
        g.down = g.compute_down_order();
        Ok(g)
    }

    /// Builds and validates.
    pub fn build(self) -> Result<ExnetGraph, GraphError> {
        let mut g = self.build_unchecked()?;
        let report = validate_exnet(&g);
        if report.valid() {
            g.validated = true;
            Ok(g)
        } else {
            Err(GraphError::Invalid(report))
        }
    }
}

impl ExnetGraph {
    pub fn vertex_count(&self) -> usize {
        self.slots.len()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn root(&self) -> VertexId {
        self.root
    }

    pub fn leaves(&self) -> &[VertexId] {
        &self.leaves
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.slots.len() as u32).map(VertexId)
    }

    pub fn arcs(&self) -> impl Iterator<Item = (ArcId, &Arc)> + '_ {
        self.arcs.iter().enumerate().map(|(i, a)| (ArcId(i as u32), a))
    }

    pub fn arc(&self, a: ArcId) -> &Arc {
        &self.arcs[a.index()]
    }

    pub fn is_leaf(&self, v: VertexId) -> bool {
        self.slots[v.index()].iter().all(Option::is_none)
    }

    pub fn is_internal(&self, v: VertexId) -> bool {
        !self.is_leaf(v)
    }

    pub fn internal_vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.vertices().filter(|&v| self.is_internal(v))
    }

    pub fn internal_count(&self) -> usize {
        self.internal_vertices().count()
    }

    /// The (left, right) arcs of an internal vertex.
    pub fn child_arcs(&self, v: VertexId) -> Option<(ArcId, ArcId)> {
        match self.slots[v.index()] {
            [Some(l), Some(r)] => Some((l, r)),
            _ => None,
        }
    }

    /// The (left, right) children of an internal vertex.
    pub fn children(&self, v: VertexId) -> Option<(VertexId, VertexId)> {
        self.child_arcs(v).map(|(l, r)| (self.arcs[l.index()].dst, self.arcs[r.index()].dst))
    }

    /// Arcs entering `v`, in arc-id order.
    pub fn parent_arcs(&self, v: VertexId) -> &[ArcId] {
        &self.parents[v.index()]
    }

    /// Distinct parents of `v`.
    pub fn parents(&self, v: VertexId) -> Vec<VertexId> {
        let mut out: Vec<VertexId> = self.parents[v.index()].iter().map(|a| self.arcs[a.index()].src).collect();
        out.dedup();
        out
    }

    /// The sibling of the arc's destination with respect to its source.
    pub fn arc_sibling(&self, a: ArcId) -> VertexId {
        let arc = &self.arcs[a.index()];
        let other = self.slots[arc.src.index()][arc.side.other().slot()]
            .expect("arc source is an internal vertex with two slots");
        self.arcs[other.index()].dst
    }

    /// Sibling of `v` with respect to `z`: the right child if `v` is the
    /// left child, and otherwise the left child.
    pub fn sibling(&self, z: VertexId, v: VertexId) -> Result<VertexId, GraphError> {
        if z.index() >= self.slots.len() {
            return Err(GraphError::UnknownVertex(z));
        }
        match self.children(z) {
            Some((l, r)) if v == l => Ok(r),
            Some((l, r)) if v == r => Ok(l),
            _ => Err(GraphError::NotAChild { parent: z, child: v }),
        }
    }

    /// Height of every vertex: 0 on leaves, else one more than the tallest child.
    pub fn heights(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.vertex_count()];
        for v in self.topological_from_leaves() {
            if let Some((l, r)) = self.children(v) {
                h[v.index()] = 1 + h[l.index()].max(h[r.index()]);
            }
        }
        h
    }

    /// Depth of every vertex: 0 at the root, else one more than the deepest parent.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.vertex_count()];
        let mut order = self.topological_from_leaves();
        order.reverse();
        for v in order {
            for &a in self.parent_arcs(v) {
                let p = self.arcs[a.index()].src;
                d[v.index()] = d[v.index()].max(d[p.index()] + 1);
            }
        }
        d
    }

    // Kahn's algorithm on "all children processed". Assumes acyclicity;
    // vertices on cycles are silently omitted.
    fn topological_from_leaves(&self) -> Vec<VertexId> {
        let n = self.vertex_count();
        let mut pending: Vec<usize> = (0..n).map(|i| self.slots[i].iter().filter(|s| s.is_some()).count()).collect();
        let mut queue: VecDeque<VertexId> = (0..n).filter(|&i| pending[i] == 0).map(|i| VertexId(i as u32)).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            out.push(v);
            for &a in &self.parents[v.index()] {
                let p = self.arcs[a.index()].src;
                pending[p.index()] -= 1;
                if pending[p.index()] == 0 {
                    queue.push_back(p);
                }
            }
        }
        out
    }

    /// True when the graph was built through [`GraphBuilder::build`] and
    /// therefore passed [`validate_exnet`].
    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// Children-before-parents schedule: leaves in leaf order, then internal
    /// vertices by ascending (height, id).
    pub fn up_order(&self) -> &[VertexId] {
        &self.up
    }

    /// Parents-before-children schedule over internal vertices: ascending
    /// (depth, id), so the root comes first. Leaves are excluded.
    pub fn down_order(&self) -> &[VertexId] {
        &self.down
    }

    fn compute_up_order(&self) -> Vec<VertexId> {
        let h = self.heights();
        let mut internal: Vec<VertexId> = self.internal_vertices().collect();
        internal.sort_by_key(|v| (h[v.index()], v.0));
        let mut out = self.leaves.clone();
        out.extend(internal);
        out
    }

    fn compute_down_order(&self) -> Vec<VertexId> {
        let d = self.depths();
        let mut internal: Vec<VertexId> = self.internal_vertices().collect();
        internal.sort_by_key(|v| (d[v.index()], v.0));
        internal
    }

    /// Graphviz rendering. Vertex labels are `id/depth/role`, arc labels the arc id.
    pub fn to_dot(&self) -> String {
        let depth = self.depths();
        let mut s = String::from("digraph exnet {\n");
        for v in self.vertices() {
            let role = if v == self.root {
                "root"
            } else if self.is_leaf(v) {
                "leaf"
            } else {
                "internal"
            };
            let _ = writeln!(s, "  v{} [label=\"{}/{}/{}\"];", v.0, v.0, depth[v.index()], role);
        }
        for (id, arc) in self.arcs() {
            let _ = writeln!(s, "  v{} -> v{} [label=\"a{}\"];", arc.src.0, arc.dst.0, id.0);
        }
        s.push_str("}\n");
        s
    }
}

/// Checks the exnet rules and reports every violation found.
pub fn validate_exnet(g: &ExnetGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = g.vertex_count();

    let roots: Vec<VertexId> = g.vertices().filter(|v| g.parents[v.index()].is_empty()).collect();
    if roots.len() != 1 {
        if roots.is_empty() {
            report.violations.push((Rule::SingleRoot, Offender::Vertex(g.root)));
        }
        for &r in roots.iter().skip(1) {
            report.violations.push((Rule::SingleRoot, Offender::Vertex(r)));
        }
    } else if roots[0] != g.root {
        report.violations.push((Rule::SingleRoot, Offender::Vertex(roots[0])));
    }

    for v in g.vertices() {
        let filled = g.slots[v.index()].iter().filter(|s| s.is_some()).count();
        if filled == 1 {
            report.violations.push((Rule::BinaryChildren, Offender::Vertex(v)));
        }
    }

    for (id, arc) in g.arcs() {
        let slot_ok = g.slots[arc.src.index()][arc.side.slot()] == Some(id);
        let parent_ok = g.parents[arc.dst.index()].contains(&id);
        if !slot_ok || !parent_ok || arc.src.index() >= n || arc.dst.index() >= n {
            report.violations.push((Rule::ParentChildConsistency, Offender::Arc(id)));
        }
    }

    let sorted = g.topological_from_leaves();
    if sorted.len() != n {
        let mut seen = vec![false; n];
        for v in sorted {
            seen[v.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            report.violations.push((Rule::Acyclic, Offender::Vertex(VertexId(i as u32))));
        }
    }
    report
}

/// An arbitrary DAG given as ordered child lists, one per vertex.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    pub children: Vec<Vec<usize>>,
}

impl Dag {
    pub fn new(vertex_count: usize) -> Self {
        Self { children: vec![Vec::new(); vertex_count] }
    }

    pub fn add_arc(&mut self, from: usize, to: usize) {
        self.children[from].push(to);
    }

    pub fn vertex_count(&self) -> usize {
        self.children.len()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.children.len()).filter(|&i| self.children[i].is_empty()).collect()
    }

    fn roots(&self) -> Vec<usize> {
        let mut has_parent = vec![false; self.children.len()];
        for cs in &self.children {
            for &c in cs {
                has_parent[c] = true;
            }
        }
        (0..self.children.len()).filter(|&i| !has_parent[i]).collect()
    }

    fn is_acyclic(&self) -> bool {
        let n = self.children.len();
        let mut indeg = vec![0usize; n];
        for cs in &self.children {
            for &c in cs {
                indeg[c] += 1;
            }
        }
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    stack.push(c);
                }
            }
        }
        seen == n
    }
}

/// Result of [`normalize_dag`]: the exnet plus, for each of its vertices,
/// the input vertex it came from (`None` for vertices created by splitting).
#[derive(Clone, Debug)]
pub struct Normalized {
    pub graph: ExnetGraph,
    pub origin: Vec<Option<usize>>,
}

impl Normalized {
    pub fn vertex_of(&self, original: usize) -> Option<VertexId> {
        self.origin.iter().position(|&o| o == Some(original)).map(|i| VertexId(i as u32))
    }
}

/// Turns a single-rooted DAG into an exnet.
///
/// Vertices with exactly one child are spliced out (their parents adopt the
/// child; a single-child root hands the root role to its child). Vertices
/// with more than two children get their child list split in order into a
/// left part of size ceil(m/2) and a right part of size floor(m/2), each
/// part hung under a fresh vertex, recursively. A part of size one is
/// attached directly since a fresh vertex over it would be single-child.
pub fn normalize_dag(raw: &Dag) -> Result<Normalized, GraphError> {
    let n = raw.vertex_count();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    for cs in &raw.children {
        if let Some(&c) = cs.iter().find(|&&c| c >= n) {
            return Err(GraphError::UnknownVertex(VertexId(c as u32)));
        }
    }
    let roots = raw.roots();
    if !raw.is_acyclic() {
        return Err(GraphError::Cyclic);
    }
    if roots.len() != 1 {
        return Err(GraphError::RootCount(roots.len()));
    }

    // Resolve each vertex to the first descendant along its single-child
    // chain that is not itself single-child.
    let mut resolved: Vec<Option<usize>> = vec![None; n];
    fn resolve(raw: &Dag, v: usize, memo: &mut [Option<usize>]) -> usize {
        let mut path = Vec::new();
        let mut cur = v;
        let target = loop {
            if let Some(r) = memo[cur] {
                break r;
            }
            if raw.children[cur].len() == 1 {
                path.push(cur);
                cur = raw.children[cur][0];
            } else {
                memo[cur] = Some(cur);
                break cur;
            }
        };
        for p in path {
            memo[p] = Some(target);
        }
        target
    }
    let root = resolve(raw, roots[0], &mut resolved);

    // Collect surviving vertices reachable from the new root, preserving
    // ascending original id for determinism.
    let mut keep = vec![false; n];
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        if keep[v] {
            continue;
        }
        keep[v] = true;
        for &c in &raw.children[v] {
            stack.push(resolve(raw, c, &mut resolved));
        }
    }

    let mut b = GraphBuilder::new();
    let mut origin = Vec::new();
    let mut new_id = vec![None; n];
    for v in 0..n {
        if keep[v] {
            new_id[v] = Some(b.add_vertex());
            origin.push(Some(v));
        }
    }

    fn attach(
        b: &mut GraphBuilder,
        origin: &mut Vec<Option<usize>>,
        parent: VertexId,
        kids: &[VertexId],
    ) -> Result<(), GraphError> {
        let m = kids.len();
        let mid = m.div_ceil(2);
        let (left, right) = kids.split_at(mid);
        let l = hang(b, origin, left)?;
        let r = hang(b, origin, right)?;
        b.connect(parent, l, r)?;
        Ok(())
    }
    fn hang(b: &mut GraphBuilder, origin: &mut Vec<Option<usize>>, part: &[VertexId]) -> Result<VertexId, GraphError> {
        if part.len() == 1 {
            return Ok(part[0]);
        }
        let v = b.add_vertex();
        origin.push(None);
        attach(b, origin, v, part)?;
        Ok(v)
    }

    for v in 0..n {
        if !keep[v] {
            continue;
        }
        let kids: Vec<VertexId> =
            raw.children[v].iter().map(|&c| new_id[resolve(raw, c, &mut resolved)].expect("kept")).collect();
        if !kids.is_empty() {
            attach(&mut b, &mut origin, new_id[v].expect("kept"), &kids)?;
        }
    }
    let graph = b.build()?;
    Ok(Normalized { graph, origin })
}
