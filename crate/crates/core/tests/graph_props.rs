mod common;

use std::collections::BTreeSet;

use exnet::graph::{normalize_dag, validate_exnet};
use exnet::{Dag, ExnetGraph};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random single-rooted DAG: vertex 0 is the root and every other vertex
/// gets at least one parent with a smaller index.
fn rooted_dag() -> impl Strategy<Value = Dag> {
    (1usize..=200)
        .prop_flat_map(|n| {
            let parents = proptest::collection::vec((any::<u64>(), 0usize..4), n.saturating_sub(1));
            (Just(n), parents)
        })
        .prop_map(|(n, parents)| {
            let mut dag = Dag::new(n);
            for (i, (h, extra)) in parents.into_iter().enumerate() {
                let v = i + 1;
                let mut seen = BTreeSet::new();
                for k in 0..=extra {
                    let p = (h.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(7 * k as u32) % v as u64) as usize;
                    if seen.insert(p) {
                        dag.add_arc(p, v);
                    }
                }
            }
            dag
        })
}

fn reachable_leaves(dag: &Dag) -> BTreeSet<usize> {
    dag.leaves().into_iter().collect()
}

fn check_orders(g: &ExnetGraph) {
    let mut pos = vec![usize::MAX; g.vertex_count()];
    for (i, v) in g.up_order().iter().enumerate() {
        pos[v.index()] = i;
    }
    assert_eq!(g.up_order().len(), g.vertex_count());
    for v in g.internal_vertices() {
        let (l, r) = g.children(v).unwrap();
        assert!(pos[l.index()] < pos[v.index()] && pos[r.index()] < pos[v.index()]);
    }
    let down = g.down_order();
    assert_eq!(down.len(), g.internal_count());
    if down.is_empty() {
        return;
    }
    assert_eq!(down[0], g.root());
    let mut dpos = vec![usize::MAX; g.vertex_count()];
    for (i, v) in down.iter().enumerate() {
        dpos[v.index()] = i;
    }
    for v in g.internal_vertices() {
        for z in g.parents(v) {
            assert!(dpos[z.index()] < dpos[v.index()]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_dags_are_valid_exnets(dag in rooted_dag()) {
        let out = normalize_dag(&dag).unwrap();
        let g = &out.graph;
        prop_assert!(validate_exnet(g).valid());
        for leaf in reachable_leaves(&dag) {
            let v = out.vertex_of(leaf).expect("leaf kept");
            prop_assert!(g.is_leaf(v));
        }
        prop_assert_eq!(g.leaves().len(), reachable_leaves(&dag).len());
        check_orders(g);
    }

    #[test]
    fn sibling_is_an_involution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = common::random_graph(&mut rng, 60);
        let g = &built.graph;
        for (a, arc) in g.arcs() {
            let s = g.arc_sibling(a);
            prop_assert_eq!(g.sibling(arc.src, s).unwrap(), arc.dst);
            prop_assert_eq!(g.sibling(arc.src, arc.dst).unwrap(), s);
        }
    }

    #[test]
    fn random_exnets_have_valid_orders(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = common::random_graph(&mut rng, 80);
        prop_assert!(validate_exnet(&built.graph).valid());
        check_orders(&built.graph);
    }
}

#[test]
fn normalize_rejects_two_roots() {
    let mut dag = Dag::new(4);
    dag.add_arc(0, 2);
    dag.add_arc(1, 3);
    assert!(normalize_dag(&dag).is_err());
}
