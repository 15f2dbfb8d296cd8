//! Constructors for the standard exnet families and their sharing schemes.
//!
//! Balanced binary trees are built by splitting an ordered leaf list into a
//! left part of size ceil(m/2) and a right part of size floor(m/2).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ArcId, ExnetGraph, GraphBuilder, GraphError, Side, VertexId};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid builder parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = BuildError> = std::result::Result<T, E>;

fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(BuildError::Param(msg.into()))
}

/// Assignment of internal vertices and of arcs into internal vertices to
/// named sharing groups. Vertex groups and arc groups are separate
/// namespaces: a vertex group backs the primary propagator and trainer of
/// its members, an arc group backs complementary propagators.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareScheme {
    vertex: BTreeMap<VertexId, String>,
    arc: BTreeMap<ArcId, String>,
}

impl ShareScheme {
    /// Every vertex and arc in its own group.
    pub fn unshared(g: &ExnetGraph) -> ShareScheme {
        let mut s = ShareScheme::default();
        for v in g.internal_vertices() {
            s.vertex.insert(v, format!("v{}", v.0));
        }
        for (a, arc) in g.arcs() {
            if g.is_internal(arc.dst) {
                s.arc.insert(a, format!("a{}", a.0));
            }
        }
        s
    }

    pub fn vertex_group(&self, v: VertexId) -> Option<&str> {
        self.vertex.get(&v).map(String::as_str)
    }

    pub fn arc_group(&self, a: ArcId) -> Option<&str> {
        self.arc.get(&a).map(String::as_str)
    }

    pub fn set_vertex(&mut self, v: VertexId, name: impl Into<String>) {
        self.vertex.insert(v, name.into());
    }

    pub fn set_arc(&mut self, a: ArcId, name: impl Into<String>) {
        self.arc.insert(a, name.into());
    }

    pub fn vertex_groups(&self) -> BTreeMap<&str, Vec<VertexId>> {
        let mut m: BTreeMap<&str, Vec<VertexId>> = BTreeMap::new();
        for (v, n) in &self.vertex {
            m.entry(n.as_str()).or_default().push(*v);
        }
        m
    }

    pub fn arc_groups(&self) -> BTreeMap<&str, Vec<ArcId>> {
        let mut m: BTreeMap<&str, Vec<ArcId>> = BTreeMap::new();
        for (a, n) in &self.arc {
            m.entry(n.as_str()).or_default().push(*a);
        }
        m
    }

    /// Checks that exactly the internal vertices and the arcs into internal
    /// vertices are assigned.
    pub fn check(&self, g: &ExnetGraph) -> std::result::Result<(), String> {
        for v in g.vertices() {
            if g.is_internal(v) != self.vertex.contains_key(&v) {
                return Err(format!("vertex {v} assignment does not match its role"));
            }
        }
        for (a, arc) in g.arcs() {
            if g.is_internal(arc.dst) != self.arc.contains_key(&a) {
                return Err(format!("arc {a} assignment does not match its destination"));
            }
        }
        Ok(())
    }
}

/// Inclusive rectangle `[h, h'] x [v, v']` of an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub h: f64,
    pub h2: f64,
    pub v: f64,
    pub v2: f64,
}

impl Region {
    const EPS: f64 = 1e-9;

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (i, j) = (row as f64, col as f64);
        self.h - Self::EPS <= i && i <= self.h2 + Self::EPS && self.v - Self::EPS <= j && j <= self.v2 + Self::EPS
    }

    fn integers(lo: f64, hi: f64) -> Vec<usize> {
        let a = (lo - Self::EPS).ceil().max(1.0) as usize;
        let b = (hi + Self::EPS).floor();
        if b < a as f64 {
            Vec::new()
        } else {
            (a..=b as usize).collect()
        }
    }

    /// All integer pixels inside the region.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let rows = Self::integers(self.h, self.h2);
        let cols = Self::integers(self.v, self.v2);
        rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
    }
}

/// What a leaf reads from the instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafSlot {
    /// Position in a sequence, 0-based.
    Sequence(usize),
    /// 1-based image coordinates.
    Pixel { row: usize, col: usize },
    /// Receives the zero token.
    Null,
}

#[derive(Clone, Debug)]
pub struct BuilderOutput {
    pub graph: ExnetGraph,
    pub sharing: ShareScheme,
    /// One entry per leaf, in the graph's leaf order.
    pub leaf_binding: Vec<LeafSlot>,
    /// Side length for image exnets.
    pub image_side: Option<usize>,
    /// Region of every vertex, for image exnets.
    pub regions: Option<Vec<Region>>,
}

impl BuilderOutput {
    /// Number of token slots an instance provides.
    pub fn slot_count(&self) -> usize {
        match self.image_side {
            Some(n) => n * n,
            None => self
                .leaf_binding
                .iter()
                .filter_map(|s| match s {
                    LeafSlot::Sequence(i) => Some(i + 1),
                    _ => None,
                })
                .max()
                .unwrap_or(0),
        }
    }
}

/// Records of one balanced tree grown under a given root.
#[derive(Debug, Default)]
struct TreeRecord {
    /// (vertex, depth, position) for every internal vertex, root first.
    vertices: Vec<(VertexId, usize, usize)>,
    /// (arc, depth of its destination, side, position).
    arcs: Vec<(ArcId, usize, Side, usize)>,
}

/// Grows a balanced binary tree rooted at the existing vertex `root` over
/// `leaves` (at least two). Interior vertices are created fresh.
fn grow_tree(b: &mut GraphBuilder, root: VertexId, leaves: &[VertexId]) -> Result<TreeRecord> {
    fn go(b: &mut GraphBuilder, node: VertexId, leaves: &[VertexId], depth: usize, rec: &mut TreeRecord) -> Result<()> {
        let pos = rec.vertices.len();
        rec.vertices.push((node, depth, pos));
        let (left, right) = leaves.split_at(leaves.len().div_ceil(2));
        let mut kids = [node; 2];
        let mut pending = Vec::new();
        for (k, part) in [left, right].into_iter().enumerate() {
            if part.len() == 1 {
                kids[k] = part[0];
            } else {
                let v = b.add_vertex();
                kids[k] = v;
                pending.push((v, part));
            }
        }
        let (la, ra) = b.connect(node, kids[0], kids[1])?;
        let n = rec.arcs.len();
        rec.arcs.push((la, depth + 1, Side::Left, n));
        rec.arcs.push((ra, depth + 1, Side::Right, n + 1));
        for (v, part) in pending {
            go(b, v, part, depth + 1, rec)?;
        }
        Ok(())
    }
    if leaves.len() < 2 {
        return param_err("a balanced tree needs at least two leaves");
    }
    let mut rec = TreeRecord::default();
    go(b, root, leaves, 0, &mut rec)?;
    Ok(rec)
}

fn side_tag(s: Side) -> &'static str {
    match s {
        Side::Left => "L",
        Side::Right => "R",
    }
}

/// Depth-wise left/right sharing over a tree: vertices at equal depth that
/// are left children share their networks and those of their incoming arc,
/// likewise right children. The root has its own group.
fn depth_sharing(g: &ExnetGraph, prefix: &str) -> ShareScheme {
    let depth = g.depths();
    let mut s = ShareScheme::default();
    s.set_vertex(g.root(), format!("{prefix}/root"));
    for (a, arc) in g.arcs() {
        if g.is_internal(arc.dst) {
            let name = format!("{prefix}/d{}/{}", depth[arc.dst.index()], side_tag(arc.side));
            s.set_vertex(arc.dst, name.clone());
            s.set_arc(a, name);
        }
    }
    s
}

/// Balanced binary tree over `n` leaves; leaf `i` (from the left) reads
/// sequence position `i`.
pub fn build_sequence_tree(n: usize, share_by_depth: bool) -> Result<BuilderOutput> {
    if n < 2 {
        return param_err(format!("sequence tree needs n >= 2, got {n}"));
    }
    let mut b = GraphBuilder::new();
    let leaves: Vec<VertexId> = (0..n).map(|_| b.add_vertex()).collect();
    let root = b.add_vertex();
    grow_tree(&mut b, root, &leaves)?;
    b.set_leaf_order(leaves);
    let graph = b.build()?;
    let sharing = if share_by_depth { depth_sharing(&graph, "seq") } else { ShareScheme::unshared(&graph) };
    Ok(BuilderOutput {
        graph,
        sharing,
        leaf_binding: (0..n).map(LeafSlot::Sequence).collect(),
        image_side: None,
        regions: None,
    })
}

/// Region tree over an `n x n` image with overlap level `overlap` in
/// `[1/2, 1)`. Vertices at even depth split the first coordinate, odd depth
/// the second; a vertex whose region is shorter than 1 along both axes is a
/// leaf.
pub fn build_image_exnet(n: usize, overlap: f64, share_by_depth: bool) -> Result<BuilderOutput> {
    if n < 1 {
        return param_err("image side must be at least 1");
    }
    if !(0.5..1.0).contains(&overlap) {
        return param_err(format!("overlap must lie in [0.5, 1), got {overlap}"));
    }
    let mut b = GraphBuilder::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut leaves = Vec::new();
    let root_region = Region { h: 1.0, h2: n as f64, v: 1.0, v2: n as f64 };
    let root = b.add_vertex();
    regions.push(root_region);

    // Explicit stack; children are pushed right first so leaves come out
    // left to right.
    let mut stack = vec![(root, root_region, 0usize)];
    while let Some((node, r, depth)) = stack.pop() {
        if r.h2 - r.h < 1.0 && r.v2 - r.v < 1.0 {
            leaves.push(node);
            continue;
        }
        let (lr, rr) = if depth % 2 == 0 {
            let span = r.h2 - r.h;
            (Region { h: r.h, h2: r.h + overlap * span, ..r }, Region { h: r.h2 - overlap * span, h2: r.h2, ..r })
        } else {
            let span = r.v2 - r.v;
            (Region { v: r.v, v2: r.v + overlap * span, ..r }, Region { v: r.v2 - overlap * span, v2: r.v2, ..r })
        };
        let l = b.add_vertex();
        regions.push(lr);
        let rv = b.add_vertex();
        regions.push(rr);
        b.connect(node, l, rv)?;
        stack.push((rv, rr, depth + 1));
        stack.push((l, lr, depth + 1));
    }

    let leaf_binding = leaves
        .iter()
        .map(|v| match regions[v.index()].pixels().as_slice() {
            [] => LeafSlot::Null,
            [(row, col)] => LeafSlot::Pixel { row: *row, col: *col },
            _ => unreachable!("leaf regions are shorter than one pixel on both axes"),
        })
        .collect();
    b.set_leaf_order(leaves);
    let graph = b.build()?;
    let sharing = if share_by_depth { depth_sharing(&graph, "img") } else { ShareScheme::unshared(&graph) };
    Ok(BuilderOutput { graph, sharing, leaf_binding, image_side: Some(n), regions: Some(regions) })
}

/// Multi-layer exnet: layer 1 is the leaves, the last layer is the root, and
/// every vertex of layer i+1 roots its own balanced tree over layer i.
pub fn build_multilayer(layer_sizes: &[usize]) -> Result<BuilderOutput> {
    if layer_sizes.len() < 2 {
        return param_err("need at least two layers");
    }
    if layer_sizes.last() != Some(&1) {
        return param_err("the last layer must hold exactly the root");
    }
    if let Some(i) = layer_sizes[..layer_sizes.len() - 1].iter().position(|&s| s < 2) {
        return param_err(format!(
            "layer {} has {} vertices; every layer below the root needs at least 2",
            i + 1,
            layer_sizes[i]
        ));
    }
    let mut b = GraphBuilder::new();
    let first: Vec<VertexId> = (0..layer_sizes[0]).map(|_| b.add_vertex()).collect();
    let leaves = first.clone();
    let mut below = first;
    for &size in &layer_sizes[1..] {
        let layer: Vec<VertexId> = (0..size).map(|_| b.add_vertex()).collect();
        for &v in &layer {
            grow_tree(&mut b, v, &below)?;
        }
        below = layer;
    }
    let n = leaves.len();
    b.set_leaf_order(leaves);
    let graph = b.build()?;
    let sharing = ShareScheme::unshared(&graph);
    Ok(BuilderOutput {
        graph,
        sharing,
        leaf_binding: (0..n).map(LeafSlot::Sequence).collect(),
        image_side: None,
        regions: None,
    })
}

/// Attention exnet over `n` tokens with `layers` layers and `heads` heads.
///
/// Per layer i below the last: q'(i,j) mixes leaf j back in (or is q(i,j)
/// itself when `mix_instance` is off), s(i,j,k) pairs q'(i,j) with q'(i,k),
/// each head h grows a balanced tree over {s(i,j,k)}_k, and with several
/// heads a merge tree joins the head roots into q(i+1,j). A final balanced
/// tree over the last layer ends at the root.
pub fn build_attention(n: usize, layers: usize, heads: usize, mix_instance: bool) -> Result<BuilderOutput> {
    if n < 2 || layers < 2 || heads < 1 {
        return param_err(format!("attention needs n >= 2, layers >= 2, heads >= 1 (got {n}, {layers}, {heads})"));
    }
    let mut b = GraphBuilder::new();
    let leaves: Vec<VertexId> = (0..n).map(|_| b.add_vertex()).collect();
    let mut share = ShareScheme::default();
    // Group assignments are collected against arcs and resolved after build,
    // once it is known which destinations are internal.
    let mut vertex_names: Vec<(VertexId, String)> = Vec::new();
    let mut arc_names: Vec<(ArcId, String)> = Vec::new();

    let mut q = leaves.clone();
    for i in 1..layers {
        let qp: Vec<VertexId> = if mix_instance {
            (0..n)
                .map(|j| {
                    let v = b.add_vertex();
                    let (la, ra) = b.connect(v, q[j], leaves[j])?;
                    vertex_names.push((v, format!("att/L{i}/qp")));
                    arc_names.push((la, format!("att/L{i}/qp/left")));
                    arc_names.push((ra, format!("att/L{i}/qp/right")));
                    Ok(v)
                })
                .collect::<Result<_>>()?
        } else {
            q.clone()
        };
        let mut s = vec![Vec::with_capacity(n); n];
        for j in 0..n {
            for k in 0..n {
                let v = b.add_vertex();
                let (la, ra) = b.connect(v, qp[j], qp[k])?;
                vertex_names.push((v, format!("att/L{i}/s")));
                arc_names.push((la, format!("att/L{i}/s/left")));
                arc_names.push((ra, format!("att/L{i}/s/right")));
                s[j].push(v);
            }
        }
        let next: Vec<VertexId> = (0..n).map(|_| b.add_vertex()).collect();
        for j in 0..n {
            let head_roots: Vec<VertexId> =
                if heads == 1 { vec![next[j]] } else { (0..heads).map(|_| b.add_vertex()).collect() };
            for (h, &hr) in head_roots.iter().enumerate() {
                let rec = grow_tree(&mut b, hr, &s[j])?;
                for (v, d, _) in rec.vertices {
                    vertex_names.push((v, format!("att/L{i}/h{h}/d{d}")));
                }
                for (a, d, _, _) in rec.arcs {
                    arc_names.push((a, format!("att/L{i}/h{h}/d{d}")));
                }
            }
            if heads > 1 {
                let rec = grow_tree(&mut b, next[j], &head_roots)?;
                for (v, _, p) in rec.vertices {
                    vertex_names.push((v, format!("att/L{i}/merge/{p}")));
                }
                for (a, _, _, p) in rec.arcs {
                    arc_names.push((a, format!("att/L{i}/merge/{p}")));
                }
            }
        }
        q = next;
    }
    let root = b.add_vertex();
    let rec = grow_tree(&mut b, root, &q)?;
    for (v, d, _) in rec.vertices {
        vertex_names.push((v, format!("att/final/d{d}")));
    }
    for (a, d, _, _) in rec.arcs {
        arc_names.push((a, format!("att/final/d{d}")));
    }

    b.set_leaf_order(leaves);
    let graph = b.build()?;
    for (v, name) in vertex_names {
        share.set_vertex(v, name);
    }
    for (a, name) in arc_names {
        if graph.is_internal(graph.arc(a).dst) {
            share.set_arc(a, name);
        }
    }
    Ok(BuilderOutput {
        graph,
        sharing: share,
        leaf_binding: (0..n).map(LeafSlot::Sequence).collect(),
        image_side: None,
        regions: None,
    })
}

/// Replaces every vertex of `base` by a supernode of `width` vertices.
///
/// Each member of an internal supernode roots its own balanced tree over
/// the members of the left child's supernode followed by those of the right
/// child's supernode. Trees of one supernode never share parameters with
/// each other; supernodes whose base vertices shared a group share
/// position-wise. With `width > 1` a final unshared tree over the root
/// supernode supplies the new root. Leaf supernode members all read their
/// base leaf's token.
pub fn apply_supernodes(base: &BuilderOutput, width: usize) -> Result<BuilderOutput> {
    if width < 1 {
        return param_err("supernode width must be at least 1");
    }
    let g = &base.graph;
    let mut b = GraphBuilder::new();
    let mut members: Vec<Vec<VertexId>> = vec![Vec::new(); g.vertex_count()];
    let mut leaf_order = Vec::new();
    let mut leaf_binding = Vec::new();
    for (li, &leaf) in g.leaves().iter().enumerate() {
        for _ in 0..width {
            let v = b.add_vertex();
            members[leaf.index()].push(v);
            leaf_order.push(v);
            leaf_binding.push(base.leaf_binding[li]);
        }
    }
    for v in g.internal_vertices() {
        members[v.index()] = (0..width).map(|_| b.add_vertex()).collect();
    }

    let mut vertex_names: Vec<(VertexId, String)> = Vec::new();
    let mut arc_names: Vec<(ArcId, String)> = Vec::new();
    for v in g.internal_vertices() {
        let (l, r) = g.children(v).expect("internal");
        let mut pool = members[l.index()].clone();
        pool.extend_from_slice(&members[r.index()]);
        let group = base.sharing.vertex_group(v).map(str::to_string).unwrap_or(format!("v{}", v.0));
        for (w, &m) in members[v.index()].iter().enumerate().take(width) {
            let rec = grow_tree(&mut b, m, &pool)?;
            for (x, _, p) in rec.vertices {
                vertex_names.push((x, format!("{group}/sn/w{w}/{p}")));
            }
            for (a, _, _, p) in rec.arcs {
                arc_names.push((a, format!("{group}/sn/w{w}/{p}")));
            }
        }
    }
    let root_members = members[g.root().index()].clone();
    if width > 1 {
        let root = b.add_vertex();
        let rec = grow_tree(&mut b, root, &root_members)?;
        for (x, _, p) in rec.vertices {
            vertex_names.push((x, format!("sn/root/{p}")));
        }
        for (a, _, _, p) in rec.arcs {
            arc_names.push((a, format!("sn/root/{p}")));
        }
    }
    b.set_leaf_order(leaf_order);
    let graph = b.build()?;
    let mut sharing = ShareScheme::default();
    for (v, name) in vertex_names {
        sharing.set_vertex(v, name);
    }
    for (a, name) in arc_names {
        if graph.is_internal(graph.arc(a).dst) {
            sharing.set_arc(a, name);
        }
    }
    Ok(BuilderOutput { graph, sharing, leaf_binding, image_side: base.image_side, regions: None })
}

fn default_true() -> bool {
    true
}

/// Four leaves under a join: `v = (l1, l2)` has the two parents
/// `a = (l0, v)` and `b = (v, l3)`, which meet at the root.
pub fn build_diamond() -> Result<BuilderOutput> {
    let mut b = GraphBuilder::new();
    let leaves: Vec<VertexId> = (0..4).map(|_| b.add_vertex()).collect();
    let v = b.add_vertex();
    let left = b.add_vertex();
    let right = b.add_vertex();
    let root = b.add_vertex();
    b.connect(v, leaves[1], leaves[2])?;
    b.connect(left, leaves[0], v)?;
    b.connect(right, v, leaves[3])?;
    b.connect(root, left, right)?;
    b.set_leaf_order(leaves);
    let graph = b.build()?;
    let sharing = ShareScheme::unshared(&graph);
    Ok(BuilderOutput {
        graph,
        sharing,
        leaf_binding: (0..4).map(LeafSlot::Sequence).collect(),
        image_side: None,
        regions: None,
    })
}

/// Random exnet over `leaves` leaves. Each of `internal` new vertices picks
/// two children uniformly from all vertices so far (possibly the same one
/// twice); the remaining parentless vertices are then paired off, oldest
/// first, until one root is left.
pub fn random_exnet(leaves: usize, internal: usize, seed: u64) -> Result<BuilderOutput> {
    if leaves < 1 {
        return param_err("random exnet needs at least one leaf".to_string());
    }
    if leaves == 1 && internal == 0 {
        return param_err("a single leaf is not an exnet".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let leaf_ids: Vec<VertexId> = (0..leaves).map(|_| b.add_vertex()).collect();
    let mut pool = leaf_ids.clone();
    let mut parentless: BTreeSet<VertexId> = leaf_ids.iter().copied().collect();
    for _ in 0..internal {
        let l = pool[rng.gen_range(0..pool.len())];
        let r = pool[rng.gen_range(0..pool.len())];
        let v = b.add_vertex();
        b.connect(v, l, r)?;
        parentless.remove(&l);
        parentless.remove(&r);
        parentless.insert(v);
        pool.push(v);
    }
    let mut open: Vec<VertexId> = parentless.into_iter().collect();
    while open.len() > 1 {
        let v = b.add_vertex();
        b.connect(v, open[0], open[1])?;
        open.drain(..2);
        open.push(v);
    }
    b.set_leaf_order(leaf_ids);
    let graph = b.build()?;
    let sharing = ShareScheme::unshared(&graph);
    Ok(BuilderOutput {
        graph,
        sharing,
        leaf_binding: (0..leaves).map(LeafSlot::Sequence).collect(),
        image_side: None,
        regions: None,
    })
}

/// Named builder with its parameters, as found in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuilderSpec {
    SequenceTree {
        n: usize,
        #[serde(default)]
        share_by_depth: bool,
    },
    Image {
        n: usize,
        overlap: f64,
        #[serde(default = "default_true")]
        share_by_depth: bool,
    },
    Multilayer {
        layer_sizes: Vec<usize>,
    },
    Attention {
        n: usize,
        layers: usize,
        #[serde(default = "one")]
        heads: usize,
        #[serde(default = "default_true")]
        mix_instance: bool,
    },
    Diamond,
    Random {
        leaves: usize,
        internal: usize,
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl BuilderSpec {
    pub fn build(&self) -> Result<BuilderOutput> {
        match self {
            BuilderSpec::SequenceTree { n, share_by_depth } => build_sequence_tree(*n, *share_by_depth),
            BuilderSpec::Image { n, overlap, share_by_depth } => build_image_exnet(*n, *overlap, *share_by_depth),
            BuilderSpec::Multilayer { layer_sizes } => build_multilayer(layer_sizes),
            BuilderSpec::Attention { n, layers, heads, mix_instance } => {
                build_attention(*n, *layers, *heads, *mix_instance)
            }
            BuilderSpec::Diamond => build_diamond(),
            BuilderSpec::Random { leaves, internal, seed } => random_exnet(*leaves, *internal, *seed),
        }
    }

    /// Builds, then widens with supernodes when `supernode_width` is given.
    pub fn build_with(&self, supernode_width: Option<usize>) -> Result<BuilderOutput> {
        let out = self.build()?;
        match supernode_width {
            Some(w) => apply_supernodes(&out, w),
            None => Ok(out),
        }
    }
}

/// Names of vertex groups that are used by more than one vertex.
pub fn shared_vertex_groups(s: &ShareScheme) -> BTreeSet<String> {
    s.vertex_groups().into_iter().filter(|(_, m)| m.len() > 1).map(|(n, _)| n.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_exnet;

    fn count_parents_ge2(g: &ExnetGraph) -> usize {
        g.vertices().filter(|&v| g.parent_arcs(v).len() >= 2).count()
    }

    #[test]
    fn sequence_tree_counts() {
        let o = build_sequence_tree(8, false).unwrap();
        assert_eq!(o.graph.leaves().len(), 8);
        assert_eq!(o.graph.internal_count(), 7);
        assert_eq!(o.graph.heights()[o.graph.root().index()], 3);
        let o = build_sequence_tree(2, false).unwrap();
        assert_eq!(o.graph.internal_count(), 1);
        let o = build_sequence_tree(5, false).unwrap();
        assert_eq!(o.graph.internal_count(), 4);
        let d = o.graph.depths();
        let ds: Vec<usize> = o.graph.leaves().iter().map(|l| d[l.index()]).collect();
        assert!(ds.iter().max().unwrap() - ds.iter().min().unwrap() <= 1);
        assert!(build_sequence_tree(1, false).is_err());
    }

    #[test]
    fn sequence_leaves_left_to_right() {
        let o = build_sequence_tree(4, false).unwrap();
        let g = &o.graph;
        let (l, r) = g.children(g.root()).unwrap();
        let (a, b) = g.children(l).unwrap();
        let (c, d) = g.children(r).unwrap();
        assert_eq!(g.leaves(), &[a, b, c, d]);
    }

    #[test]
    fn sequence_depth_sharing() {
        let o = build_sequence_tree(8, true).unwrap();
        o.sharing.check(&o.graph).unwrap();
        let groups = o.sharing.vertex_groups();
        assert_eq!(groups.len(), 5);
        assert_eq!(groups["seq/d1/L"].len(), 1);
        assert_eq!(groups["seq/d2/L"].len(), 2);
        assert_eq!(groups["seq/d2/R"].len(), 2);
        let g = &o.graph;
        for (a, arc) in g.arcs() {
            if g.is_internal(arc.dst) {
                assert_eq!(o.sharing.arc_group(a), o.sharing.vertex_group(arc.dst));
            }
        }
    }

    #[test]
    fn image_root_split() {
        let o = build_image_exnet(4, 0.5, true).unwrap();
        let g = &o.graph;
        let regions = o.regions.as_ref().unwrap();
        let (l, r) = g.children(g.root()).unwrap();
        let lr = regions[l.index()];
        let rr = regions[r.index()];
        assert_eq!((lr.h, lr.h2, lr.v, lr.v2), (1.0, 2.5, 1.0, 4.0));
        assert_eq!((rr.h, rr.h2, rr.v, rr.v2), (2.5, 4.0, 1.0, 4.0));
    }

    #[test]
    fn image_two_by_two() {
        let o = build_image_exnet(2, 0.5, true).unwrap();
        assert_eq!(o.graph.leaves().len(), 4);
        let mut px: Vec<_> = o
            .leaf_binding
            .iter()
            .map(|s| match s {
                LeafSlot::Pixel { row, col } => (*row, *col),
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        px.sort();
        assert_eq!(px, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn image_terminates_and_covers() {
        for n in 1..=16 {
            for lambda in [0.5, 0.6, 0.75] {
                let o = build_image_exnet(n, lambda, true).unwrap();
                let g = &o.graph;
                assert!(validate_exnet(g).valid());
                let regions = o.regions.as_ref().unwrap();
                for row in 1..=n {
                    for col in 1..=n {
                        let bound = o.leaf_binding.iter().filter(|s| **s == LeafSlot::Pixel { row, col }).count();
                        let containing = g.leaves().iter().filter(|l| regions[l.index()].contains(row, col)).count();
                        assert!(bound >= 1);
                        assert_eq!(bound, containing);
                    }
                }
            }
        }
        assert!(build_image_exnet(4, 1.0, true).is_err());
        assert!(build_image_exnet(4, 0.4, true).is_err());
    }

    #[test]
    fn multilayer_examples() {
        let o = build_multilayer(&[4, 1]).unwrap();
        assert_eq!(o.graph.vertex_count(), 7);
        assert_eq!(count_parents_ge2(&o.graph), 0);
        let o = build_multilayer(&[4, 2, 1]).unwrap();
        let g = &o.graph;
        assert_eq!(g.vertex_count(), 11);
        assert_eq!(g.arc_count(), 14);
        for &l in g.leaves() {
            assert_eq!(g.parent_arcs(l).len(), 2);
        }
        assert!(build_multilayer(&[4, 2]).is_err());
        assert!(build_multilayer(&[4, 1, 1]).is_err());
        assert!(build_multilayer(&[1]).is_err());
    }

    #[test]
    fn attention_small() {
        let o = build_attention(2, 2, 1, false).unwrap();
        assert_eq!(o.graph.vertex_count(), 9);
        assert_eq!(o.graph.arc_count(), 14);
        let o2 = build_attention(2, 2, 2, false).unwrap();
        // two head trees per j with fresh roots, then a 2-leaf merge tree
        assert_eq!(o2.graph.vertex_count(), 9 + 2 * 2);
        assert_eq!(o2.graph.arc_count(), 14 + 2 * 2 + 2 * 2);
        assert!(build_attention(1, 2, 1, true).is_err());
    }

    #[test]
    fn attention_self_pair_has_two_arcs() {
        let o = build_attention(3, 2, 1, true).unwrap();
        let g = &o.graph;
        let dup = g
            .internal_vertices()
            .filter(|&v| {
                let (l, r) = g.children(v).unwrap();
                l == r
            })
            .count();
        // q'(1,j) mixes leaf j into itself and s(1,j,j) pairs q'(1,j) with itself
        assert_eq!(dup, 3 + 3);
        for v in g.internal_vertices() {
            let (la, ra) = g.child_arcs(v).unwrap();
            assert_ne!(la, ra);
        }
    }

    #[test]
    fn attention_sharing_roles() {
        let o = build_attention(3, 3, 2, true).unwrap();
        o.sharing.check(&o.graph).unwrap();
        let vg = o.sharing.vertex_groups();
        assert_eq!(vg["att/L1/qp"].len(), 3);
        assert_eq!(vg["att/L1/s"].len(), 9);
        assert_eq!(vg["att/L2/merge/0"].len(), 3);
        assert!(!vg.contains_key("att/L3/s"));
    }

    #[test]
    fn supernode_counts() {
        let base = build_sequence_tree(2, false).unwrap();
        let w1 = apply_supernodes(&base, 1).unwrap();
        assert_eq!(w1.graph.vertex_count(), 3);
        assert_eq!(w1.graph.arc_count(), 2);
        let w2 = apply_supernodes(&base, 2).unwrap();
        assert_eq!(w2.graph.vertex_count(), 11);
        assert_eq!(w2.graph.arc_count(), 14);
        assert_eq!(
            w2.leaf_binding,
            vec![LeafSlot::Sequence(0), LeafSlot::Sequence(0), LeafSlot::Sequence(1), LeafSlot::Sequence(1)]
        );
        assert!(apply_supernodes(&base, 0).is_err());
    }

    #[test]
    fn supernode_trees_do_not_share_within_a_supernode() {
        let base = build_sequence_tree(4, true).unwrap();
        let out = apply_supernodes(&base, 2).unwrap();
        out.sharing.check(&out.graph).unwrap();
        for (name, members) in out.sharing.vertex_groups() {
            // only depth-shared base vertices can make groups larger than one
            if members.len() > 1 {
                assert!(name.starts_with("seq/d"), "{name}");
            }
        }
    }
}
