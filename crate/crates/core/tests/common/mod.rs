#![allow(dead_code)]

use exnet::audit::{compare, numeric_gradients, AuditReport, DEFAULT_STEP};
use exnet::builders::{random_exnet, BuilderOutput};
use exnet::neural::Role;
use exnet::tasks::{partition_tokeniser, squared_loss, Loss};
use exnet::xprop::{compute_gradients, down_pass, up_pass};
use exnet::{Activation, ExnetGraph, Mode, NetDims, NetworkBundle, VertexId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain evaluation of an MLP from its parameter vector: per layer, row-major
/// weights followed by the bias, hidden layers with `act`, last with `out_act`.
pub fn reference_mlp(
    widths: &[usize],
    act: Activation,
    out_act: Activation,
    params: &[f64],
    input: &[f64],
) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut off = 0;
    for (i, w) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let bias = off + n_in * n_out;
        let a = if i + 2 == widths.len() { out_act } else { act };
        let mut y = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let mut acc = params[bias + r];
            for c in 0..n_in {
                acc += params[off + r * n_in + c] * x[c];
            }
            y.push(match a {
                Activation::Tanh => acc.tanh(),
                Activation::Relu => acc.max(0.0),
                Activation::Identity => acc,
            });
        }
        off = bias + n_out;
        x = y;
    }
    x
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Primary extraction of `v` by direct recursion over the graph.
pub fn recursive_alpha(g: &ExnetGraph, nets: &NetworkBundle, tokens: &[Vec<f64>], v: VertexId) -> Vec<f64> {
    if let Some(pos) = g.leaves().iter().position(|&l| l == v) {
        return tokens[pos].clone();
    }
    let d = nets.dims();
    let (l, r) = g.children(v).unwrap();
    let mut input = recursive_alpha(g, nets, tokens, l);
    input.extend(recursive_alpha(g, nets, tokens, r));
    reference_mlp(
        &widths(2 * d.primary, &d.hidden, d.primary),
        d.activation,
        d.extraction_activation,
        nets.primary_params(v),
        &input,
    )
}

/// Root prediction by recursion: `T(root; alpha(root), 0)`.
pub fn recursive_prediction(g: &ExnetGraph, nets: &NetworkBundle, tokens: &[Vec<f64>]) -> Vec<f64> {
    let d = nets.dims();
    let mut input = recursive_alpha(g, nets, tokens, g.root());
    input.extend(std::iter::repeat_n(0.0, d.complementary));
    reference_mlp(
        &widths(d.primary + d.complementary, &d.hidden, d.output),
        d.activation,
        Activation::Identity,
        nets.trainer_params(g.root()),
        &input,
    )
}

pub fn random_tokens(rng: &mut ChaCha8Rng, count: usize, d_p: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..d_p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// A random exnet with at most `max_vertices` vertices.
pub fn random_graph(rng: &mut ChaCha8Rng, max_vertices: usize) -> BuilderOutput {
    loop {
        let leaves = rng.gen_range(1..=(max_vertices / 2).max(1));
        let internal = rng.gen_range(0..=max_vertices / 2);
        if leaves == 1 && internal == 0 {
            continue;
        }
        let out = random_exnet(leaves, internal, rng.gen()).unwrap();
        if out.graph.vertex_count() <= max_vertices {
            return out;
        }
    }
}

pub fn small_dims(rng: &mut ChaCha8Rng, max_dim: usize) -> NetDims {
    NetDims {
        primary: rng.gen_range(1..=max_dim),
        complementary: rng.gen_range(1..=max_dim),
        output: rng.gen_range(1..=3),
        hidden: vec![rng.gen_range(1..=max_dim)],
        activation: Activation::Tanh,
        extraction_activation: Activation::Tanh,
    }
}

pub fn random_loss(rng: &mut ChaCha8Rng, dim: usize) -> Loss {
    if dim >= 2 && rng.gen_bool(0.5) {
        Loss::SoftmaxXent { class: rng.gen_range(0..dim), num_classes: dim }
    } else {
        squared_loss((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }
}

/// Runs one trial's passes on a random setup and audits its gradients.
pub fn audit_random(seed: u64, max_vertices: usize, max_dim: usize, mode: Mode) -> (AuditReport, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let built = random_graph(&mut rng, max_vertices);
    let dims = small_dims(&mut rng, max_dim);
    let nets = NetworkBundle::new(&built.graph, &built.sharing, dims.clone(), rng.gen()).unwrap();
    let g = &built.graph;
    let tokens = random_tokens(&mut rng, g.leaves().len(), dims.primary);
    let loss = random_loss(&mut rng, dims.output);
    let (primary, _) = up_pass(g, &nets, &tokens).unwrap();
    let comp = down_pass(g, &nets, &primary, mode, rng.gen()).unwrap();
    let analytic = compute_gradients(g, &nets, &primary, &comp, &loss, mode).unwrap();
    let numeric = numeric_gradients(g, &nets, &primary, &comp, &loss, mode, DEFAULT_STEP).unwrap();
    (compare(&nets, &analytic.grads, &numeric), g.vertex_count())
}

pub fn tokeniser_for(g: &ExnetGraph, d_p: usize) -> exnet::Tokeniser {
    partition_tokeniser(d_p, g.leaves().len())
}

pub fn role_of(nets: &NetworkBundle, g: exnet::GroupId) -> Role {
    nets.group(g).role
}
