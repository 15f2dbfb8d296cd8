mod common;

use exnet::builders::{build_diamond, build_sequence_tree};
use exnet::neural::{Optimizer, Role};
use exnet::tasks::{make_task, partition_tokeniser, squared_loss, Sample, TaskParams};
use exnet::xprop::{compute_gradients, down_pass, local_predictions, up_pass, XProp};
use exnet::{Activation, LossFn, Mode, NetDims, NetworkBundle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(p: usize, c: usize, out: usize) -> NetDims {
    NetDims { primary: p, complementary: c, output: out, hidden: vec![5], ..NetDims::default() }
}

#[test]
fn single_vertex_prediction_is_direct_composition() {
    let built = build_sequence_tree(2, false).unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(3, 2, 1), 4).unwrap();
    let tokens = vec![vec![0.1, -0.2, 0.3], vec![0.5, 0.0, -0.7]];
    let (_, y) = up_pass(g, &nets, &tokens).unwrap();
    let root = g.root();
    let a = nets.net(Role::Primary).forward2(nets.primary_params(root), &tokens[0], &tokens[1]).unwrap();
    let expected = nets.net(Role::Trainer).forward2(nets.trainer_params(root), &a, &[0.0, 0.0]).unwrap();
    assert_eq!(y, expected);
}

#[test]
fn left_identity_propagates_leftmost_token() {
    let built = build_sequence_tree(8, false).unwrap();
    let g = &built.graph;
    let mut d = dims(2, 2, 1);
    d.hidden = vec![2];
    d.activation = Activation::Relu;
    d.extraction_activation = Activation::Relu;
    let mut nets = NetworkBundle::new(g, &built.sharing, d, 1).unwrap();
    // Hidden layer: h = relu(x_left); output: relu(h).
    for v in g.internal_vertices() {
        let gid = nets.primary_group(v).unwrap();
        let p = nets.params_mut(gid);
        p.iter_mut().for_each(|x| *x = 0.0);
        p[0] = 1.0; // hidden 0 <- left component 0
        p[4 + 1] = 1.0; // hidden 1 <- left component 1
        p[10] = 1.0; // out 0 <- hidden 0
        p[13] = 1.0; // out 1 <- hidden 1
    }
    let tokens: Vec<Vec<f64>> = (0..8).map(|i| vec![0.25 * i as f64 + 0.5, 0.125]).collect();
    let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
    assert_eq!(primary.get(g.root()), &tokens[0][..]);
}

#[test]
fn balanced_tree_matches_recursive_evaluation() {
    let built = build_sequence_tree(8, false).unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(4, 3, 2), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = common::random_tokens(&mut rng, 8, 4);
    let (_, y) = up_pass(g, &nets, &tokens).unwrap();
    assert_eq!(y, common::recursive_prediction(g, &nets, &tokens));
}

#[test]
fn diamond_dm_sums_and_sm_picks_one() {
    let built = build_diamond().unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(3, 3, 1), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = common::random_tokens(&mut rng, 4, 3);
    let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
    let join = g.internal_vertices().find(|&v| g.parent_arcs(v).len() == 2).unwrap();
    let arcs = g.parent_arcs(join).to_vec();

    let dm = down_pass(g, &nets, &primary, Mode::Dm, 0).unwrap();
    let (b1, b2) = (dm.arc(arcs[0]).unwrap(), dm.arc(arcs[1]).unwrap());
    let sum: Vec<f64> = b1.iter().zip(b2).map(|(a, b)| a + b).collect();
    assert_eq!(dm.vertex(join).unwrap(), &sum[..]);
    assert_eq!(dm.vertex(g.root()).unwrap(), &[0.0; 3]);

    for seed in 0..20 {
        let sm = down_pass(g, &nets, &primary, Mode::Sm, seed).unwrap();
        let chosen = sm.sm_choices[join.index()].unwrap();
        assert!(arcs.contains(&chosen));
        assert_eq!(sm.vertex(join).unwrap(), sm.arc(chosen).unwrap());
    }
}

#[test]
fn sm_choice_is_uniform_in_expectation() {
    let built = build_diamond().unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(2, 2, 1), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = common::random_tokens(&mut rng, 4, 2);
    let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
    let join = g.internal_vertices().find(|&v| g.parent_arcs(v).len() == 2).unwrap();
    let runs = 4000;
    let mut samples = Vec::with_capacity(runs);
    for seed in 0..runs as u64 {
        let sm = down_pass(g, &nets, &primary, Mode::Sm, seed).unwrap();
        samples.push(sm.vertex(join).unwrap()[0]);
    }
    let dm = down_pass(g, &nets, &primary, Mode::Dm, 0).unwrap();
    let arcs = g.parent_arcs(join);
    let target = 0.5 * (dm.arc(arcs[0]).unwrap()[0] + dm.arc(arcs[1]).unwrap()[0]);
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    let se = (var / runs as f64).sqrt();
    assert!((mean - target).abs() <= 3.0 * se, "mean {mean} target {target} se {se}");
}

#[test]
fn zero_trainers_with_zero_target_give_zero_gradients() {
    let built = build_diamond().unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(2, 2, 1), 5).unwrap();
    let tokens = vec![vec![0.3, 0.1]; 4];
    let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
    let comp = down_pass(g, &nets, &primary, Mode::Dm, 0).unwrap();
    let local = local_predictions(g, &nets, &primary, &comp).unwrap();
    assert_eq!(local[&g.root()], up_pass(g, &nets, &tokens).unwrap().1);
    let mut flat = nets.clone();
    for gid in flat.group_ids().collect::<Vec<_>>() {
        if flat.group(gid).role == Role::Trainer {
            flat.params_mut(gid).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let (primary, _) = up_pass(g, &flat, &tokens).unwrap();
    let comp = down_pass(g, &flat, &primary, Mode::Dm, 0).unwrap();
    let pass = compute_gradients(g, &flat, &primary, &comp, &squared_loss(vec![0.0]), Mode::Dm).unwrap();
    assert_eq!(pass.grads.norm(), 0.0);
}

#[test]
fn gradient_audit_on_diamond_dm() {
    let built = build_diamond().unwrap();
    let g = &built.graph;
    let nets = NetworkBundle::new(g, &built.sharing, dims(3, 2, 2), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = common::random_tokens(&mut rng, 4, 3);
    let loss = squared_loss(vec![0.4, -0.9]);
    for mode in [Mode::Dm, Mode::Sm] {
        let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
        let comp = down_pass(g, &nets, &primary, mode, 17).unwrap();
        let ana = compute_gradients(g, &nets, &primary, &comp, &loss, mode).unwrap();
        let num = exnet::audit::numeric_gradients(g, &nets, &primary, &comp, &loss, mode, 1e-5).unwrap();
        let report = exnet::audit::compare(&nets, &ana.grads, &num);
        assert!(report.passes(1e-4), "{mode:?}: {report}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let built = build_sequence_tree(4, false).unwrap();
    let nets = NetworkBundle::new(&built.graph, &built.sharing, dims(2, 2, 1), 3).unwrap();
    let before = nets.to_checkpoint();
    let params = TaskParams { n: 4, d_p: 2, out_dim: 1, k: None };
    let task = make_task("token_sum_regression", &params, 11).unwrap();
    let mut xp =
        XProp::new(built.graph.clone(), nets, partition_tokeniser(2, 4), Optimizer::sgd(0.0), Mode::Dm, 5).unwrap();
    let losses: Vec<f64> = (0..10).map(|t| xp.run_trial(&task, t).unwrap().loss_value).collect();
    assert_eq!(xp.bundle.to_checkpoint(), before);
    let again = {
        let nets = NetworkBundle::new(&built.graph, &built.sharing, dims(2, 2, 1), 3).unwrap();
        let mut xp =
            XProp::new(built.graph.clone(), nets, partition_tokeniser(2, 4), Optimizer::sgd(0.0), Mode::Dm, 99)
                .unwrap();
        (0..10).map(|t| xp.run_trial(&task, t).unwrap().loss_value).collect::<Vec<_>>()
    };
    assert_eq!(losses, again);
}

#[test]
fn memorizing_four_instances() {
    let built = build_sequence_tree(4, false).unwrap();
    let d = NetDims { primary: 4, complementary: 4, output: 1, hidden: vec![16], ..NetDims::default() };
    let nets = NetworkBundle::new(&built.graph, &built.sharing, d, 21).unwrap();
    let params = TaskParams { n: 4, d_p: 4, out_dim: 1, k: Some(4) };
    let task = make_task("memorize_k", &params, 8).unwrap();
    let mut xp =
        XProp::new(built.graph.clone(), nets, partition_tokeniser(4, 4), Optimizer::adam(3e-3), Mode::Dm, 1).unwrap();
    let set = task.fixed_set().unwrap().clone();
    let mean = |xp: &XProp| -> f64 {
        set.samples.iter().map(|s| s.loss.value(&xp.predict(&s.instance).unwrap()).unwrap()).sum::<f64>() / 4.0
    };
    let initial = mean(&xp);
    for t in 0..5000 {
        xp.run_trial(&task, t).unwrap();
    }
    let last = mean(&xp);
    assert!(last < 0.01 * initial, "initial {initial} final {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn up_pass_matches_recursive_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = common::random_graph(&mut rng, 31);
        let d = common::small_dims(&mut rng, 6);
        let nets = NetworkBundle::new(&built.graph, &built.sharing, d.clone(), rng.gen()).unwrap();
        let tokens = common::random_tokens(&mut rng, built.graph.leaves().len(), d.primary);
        let (_, y) = up_pass(&built.graph, &nets, &tokens).unwrap();
        let oracle = common::recursive_prediction(&built.graph, &nets, &tokens);
        prop_assert_eq!(
            y.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            oracle.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), dm in any::<bool>()) {
        let mode = if dm { Mode::Dm } else { Mode::Sm };
        let (report, _) = common::audit_random(seed, 15, 8, mode);
        prop_assert!(report.passes(1e-4), "{}", report);
    }

    #[test]
    fn trees_make_sm_and_dm_identical(seed in any::<u64>(), n in 2usize..12) {
        let built = build_sequence_tree(n, false).unwrap();
        let g = &built.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = common::small_dims(&mut rng, 5);
        let nets = NetworkBundle::new(g, &built.sharing, d.clone(), rng.gen()).unwrap();
        let tokens = common::random_tokens(&mut rng, n, d.primary);
        let loss = common::random_loss(&mut rng, d.output);
        let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
        let sm = down_pass(g, &nets, &primary, Mode::Sm, rng.gen()).unwrap();
        let dm = down_pass(g, &nets, &primary, Mode::Dm, rng.gen()).unwrap();
        prop_assert_eq!(sm.bits(), dm.bits());
        let gs = compute_gradients(g, &nets, &primary, &sm, &loss, Mode::Sm).unwrap();
        let gd = compute_gradients(g, &nets, &primary, &dm, &loss, Mode::Dm).unwrap();
        prop_assert_eq!(gs.grads, gd.grads);
    }
}

#[test]
fn trial_result_reports_pre_update_prediction() {
    let built = build_sequence_tree(2, false).unwrap();
    let nets = NetworkBundle::new(&built.graph, &built.sharing, dims(1, 1, 1), 3).unwrap();
    let mut xp =
        XProp::new(built.graph.clone(), nets, partition_tokeniser(1, 2), Optimizer::sgd(0.1), Mode::Sm, 0).unwrap();
    let sample = Sample { instance: vec![0.5, -0.5], loss: squared_loss(vec![1.0]) };
    let before = xp.predict(&sample.instance).unwrap();
    let res = xp.step(0, &sample).unwrap();
    assert_eq!(res.prediction, before);
    assert_ne!(xp.predict(&sample.instance).unwrap(), before);
}
