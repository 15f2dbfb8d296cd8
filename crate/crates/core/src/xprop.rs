//! Extraction propagation: one trial of up pass, prediction, down pass and
//! local gradient computation.
//!
//! No gradient ever flows between vertices. Each vertex's trainer sees the
//! vertex's primary extraction (summary of everything below it) and its
//! complementary extraction (summary of everything else) and is asked to
//! predict the target directly. The primary propagator at a vertex is
//! trained through its own trainer, and the complementary propagator on an
//! arc through the trainer at the arc's destination.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate_exnet, ArcId, ExnetGraph, ValidationReport, VertexId};
use crate::neural::{concat, GradSet, NetworkBundle, NeuralError, Optimizer, Role};
use crate::seed::mix;
use crate::tasks::{LossFn, Sample, TaskError, TaskSpec, Tokeniser};

#[derive(Debug, Error)]
pub enum XPropError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("expected {expected} leaf tokens, got {got}")]
    TokenCount { expected: usize, got: usize },
    #[error("invalid exnet: {0}")]
    Invalid(ValidationReport),
    #[error("missing cache entry: {0}")]
    MissingCache(String),
    #[error("network output dimension {net} does not match the loss dimension {loss}")]
    OutputDim { net: usize, loss: usize },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
}

pub type Result<T, E = XPropError> = std::result::Result<T, E>;

/// How a vertex with several parents forms its complementary extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Stochastic: one parent arc chosen uniformly at random.
    Sm,
    /// Deterministic: sum over all parent arcs.
    Dm,
}

/// Primary extraction of every vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryCache {
    pub alpha: Vec<Vec<f64>>,
}

impl PrimaryCache {
    pub fn get(&self, v: VertexId) -> &[f64] {
        &self.alpha[v.index()]
    }
}

/// Complementary extractions of one down pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementaryCache {
    /// Per internal vertex; zero at the root.
    pub vertex_beta: Vec<Option<Vec<f64>>>,
    /// Per arc into an internal vertex.
    pub arc_beta: Vec<Option<Vec<f64>>>,
    /// SM only: the parent arc chosen for each internal non-root vertex.
    pub sm_choices: Vec<Option<ArcId>>,
}

impl ComplementaryCache {
    pub fn vertex(&self, v: VertexId) -> Result<&[f64]> {
        self.vertex_beta[v.index()]
            .as_deref()
            .ok_or_else(|| XPropError::MissingCache(format!("complementary extraction of {v}")))
    }

    pub fn arc(&self, a: ArcId) -> Result<&[f64]> {
        self.arc_beta[a.index()]
            .as_deref()
            .ok_or_else(|| XPropError::MissingCache(format!("complementary extraction of arc {a}")))
    }

    /// Bit patterns of every stored value, for exact comparisons.
    pub fn bits(&self) -> Vec<u64> {
        self.vertex_beta.iter().chain(&self.arc_beta).flatten().flatten().map(|x| x.to_bits()).collect()
    }
}

fn ensure_valid(g: &ExnetGraph) -> Result<()> {
    if g.is_validated() {
        return Ok(());
    }
    let report = validate_exnet(g);
    if report.valid() {
        Ok(())
    } else {
        Err(XPropError::Invalid(report))
    }
}

/// Computes every primary extraction from the leaf tokens (in leaf order)
/// and the root prediction `T(root; alpha(root), 0)`.
pub fn up_pass(g: &ExnetGraph, nets: &NetworkBundle, tokens: &[Vec<f64>]) -> Result<(PrimaryCache, Vec<f64>)> {
    ensure_valid(g)?;
    let d_p = nets.dims().primary;
    if tokens.len() != g.leaves().len() {
        return Err(XPropError::TokenCount { expected: g.leaves().len(), got: tokens.len() });
    }
    let mut alpha: Vec<Vec<f64>> = vec![Vec::new(); g.vertex_count()];
    for (leaf, tok) in g.leaves().iter().zip(tokens) {
        if tok.len() != d_p {
            return Err(NeuralError::Dim { expected: d_p, got: tok.len() }.into());
        }
        alpha[leaf.index()] = tok.clone();
    }
    let f = nets.net(Role::Primary);
    for &v in &g.up_order()[g.leaves().len()..] {
        let (l, r) = g.children(v).expect("internal vertex");
        let out = f.forward2(nets.primary_params(v), &alpha[l.index()], &alpha[r.index()])?;
        alpha[v.index()] = out;
    }
    let root = g.root();
    let zero = vec![0.0; nets.dims().complementary];
    let prediction = nets.net(Role::Trainer).forward2(nets.trainer_params(root), &alpha[root.index()], &zero)?;
    Ok((PrimaryCache { alpha }, prediction))
}

/// Index of the parent arc SM picks for `v` under `seed`.
pub fn sm_choice(seed: u64, v: VertexId, parent_count: usize) -> usize {
    ChaCha8Rng::seed_from_u64(mix(seed, v.0 as u64)).gen_range(0..parent_count)
}

/// Computes complementary extractions root-down. In SM, each internal
/// non-root vertex draws its parent arc from a stream keyed by
/// `(seed, vertex)`.
pub fn down_pass(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    primary: &PrimaryCache,
    mode: Mode,
    seed: u64,
) -> Result<ComplementaryCache> {
    let d_c = nets.dims().complementary;
    let mut cache = ComplementaryCache {
        vertex_beta: vec![None; g.vertex_count()],
        arc_beta: vec![None; g.arc_count()],
        sm_choices: vec![None; g.vertex_count()],
    };
    let gnet = nets.net(Role::Complementary);
    let root = g.root();
    for &v in g.down_order() {
        if v == root {
            cache.vertex_beta[v.index()] = Some(vec![0.0; d_c]);
            continue;
        }
        let parents = g.parent_arcs(v);
        for &a in parents {
            let z = g.arc(a).src;
            let beta_z = cache.vertex_beta[z.index()]
                .as_deref()
                .ok_or_else(|| XPropError::MissingCache(format!("complementary extraction of {z}")))?;
            let sib = g.arc_sibling(a);
            let out = gnet.forward2(nets.complementary_params(a), beta_z, primary.get(sib))?;
            cache.arc_beta[a.index()] = Some(out);
        }
        let beta = match mode {
            Mode::Sm => {
                let a = parents[sm_choice(seed, v, parents.len())];
                cache.sm_choices[v.index()] = Some(a);
                cache.arc_beta[a.index()].clone().expect("just computed")
            }
            Mode::Dm => {
                let mut acc = cache.arc_beta[parents[0].index()].clone().expect("just computed");
                for a in &parents[1..] {
                    let b = cache.arc_beta[a.index()].as_ref().expect("just computed");
                    for (x, y) in acc.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                acc
            }
        };
        cache.vertex_beta[v.index()] = Some(beta);
    }
    Ok(cache)
}

/// Gradients of one trial together with the local predictions they were
/// seeded from.
#[derive(Clone, Debug)]
pub struct GradientPass {
    pub grads: GradSet,
    /// Trainer output at every internal vertex, in ascending vertex order.
    pub local: BTreeMap<VertexId, Vec<f64>>,
}

/// Per-vertex local gradients, all evaluated at the current parameters:
///
/// * trainer: d/dθT(v) of `L(T(θT(v); α(v), β(v)))`;
/// * primary propagator: d/dθp(v) of `L(T(θT(v); F(θp(v); α(l), α(r)), β(v)))`;
/// * complementary propagator on each arc (z,v), v internal: d/dθc(z,v) of
///   `L(T(θT(v); α(v), G(θc(z,v); β(z), α(σ))))` in SM, or of the same
///   expression with β(v) written as the sum over all parent arcs in DM.
///
/// Trainer parameters are constants inside the propagator terms. Shared
/// groups receive the sum of their members' gradients, accumulated in
/// ascending vertex order.
pub fn compute_gradients(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    primary: &PrimaryCache,
    comp: &ComplementaryCache,
    loss: &dyn LossFn,
    mode: Mode,
) -> Result<GradientPass> {
    let d_p = nets.dims().primary;
    let t_net = nets.net(Role::Trainer);
    let f_net = nets.net(Role::Primary);
    let g_net = nets.net(Role::Complementary);
    if t_net.output_dim() != loss.dim() {
        return Err(XPropError::OutputDim { net: t_net.output_dim(), loss: loss.dim() });
    }
    let mut grads = GradSet::zeros(nets);
    let mut local = BTreeMap::new();
    let mut scratch = vec![0.0; t_net.param_count()];

    for v in g.internal_vertices() {
        let beta_v = comp.vertex(v)?;
        let theta_t = nets.trainer_params(v);
        let trace = t_net.trace(theta_t, &concat(primary.get(v), beta_v))?;
        let y = trace.output().to_vec();
        let dy = loss.grad(&y)?;

        let tg = nets.trainer_group(v).expect("internal");
        let d_in = t_net.backward_from_trace(theta_t, &trace, &dy, grads.slot(tg, t_net.param_count()))?;
        let (d_alpha, d_beta) = d_in.split_at(d_p);

        let (l, r) = g.children(v).expect("internal");
        let theta_p = nets.primary_params(v);
        let f_trace = f_net.trace(theta_p, &concat(primary.get(l), primary.get(r)))?;
        let pg = nets.primary_group(v).expect("internal");
        f_net.backward_from_trace(theta_p, &f_trace, d_alpha, grads.slot(pg, f_net.param_count()))?;

        for &a in g.parent_arcs(v) {
            let z = g.arc(a).src;
            let theta_c = nets.complementary_params(a);
            let g_trace = g_net.trace(theta_c, &concat(comp.vertex(z)?, primary.get(g.arc_sibling(a))))?;
            let upstream: Vec<f64> = match mode {
                Mode::Dm => d_beta.to_vec(),
                Mode::Sm if comp.sm_choices[v.index()] == Some(a) => d_beta.to_vec(),
                Mode::Sm => {
                    // This arc's own extraction substitutes for β(v).
                    let t2 = t_net.trace(theta_t, &concat(primary.get(v), g_trace.output()))?;
                    let dy2 = loss.grad(t2.output())?;
                    let d2 = t_net.backward_from_trace(theta_t, &t2, &dy2, &mut scratch)?;
                    d2[d_p..].to_vec()
                }
            };
            let cg = nets.complementary_group(a).expect("arc into internal vertex");
            g_net.backward_from_trace(theta_c, &g_trace, &upstream, grads.slot(cg, g_net.param_count()))?;
        }
        local.insert(v, y);
    }
    Ok(GradientPass { grads, local })
}

/// Trainer output `T(θT(v); α(v), β(v))` at every internal vertex.
pub fn local_predictions(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    primary: &PrimaryCache,
    comp: &ComplementaryCache,
) -> Result<BTreeMap<VertexId, Vec<f64>>> {
    let t_net = nets.net(Role::Trainer);
    g.internal_vertices()
        .map(|v| {
            let y = t_net.forward2(nets.trainer_params(v), primary.get(v), comp.vertex(v)?)?;
            Ok((v, y))
        })
        .collect()
}

/// Largest Euclidean distance between a local prediction and the root's.
pub fn disagreement(local: &BTreeMap<VertexId, Vec<f64>>, root: VertexId) -> f64 {
    let r = &local[&root];
    local.values().map(|y| y.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    /// Prediction made before the update.
    pub prediction: Vec<f64>,
    pub loss_value: f64,
    pub grads: GradSet,
    pub local: BTreeMap<VertexId, Vec<f64>>,
    pub local_disagreement: f64,
}

impl TrialResult {
    pub fn prediction_norm(&self) -> f64 {
        norm(&self.prediction)
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.norm()
    }
}

/// One full trial: tokenise, up pass, predict, down pass, gradients, update.
/// SM choices are keyed by `sm_seed`; pass a per-trial seed.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    g: &ExnetGraph,
    nets: &mut NetworkBundle,
    tokeniser: &Tokeniser,
    sample: &Sample,
    opt: &mut Optimizer,
    mode: Mode,
    sm_seed: u64,
) -> Result<TrialResult> {
    let tokens = tokeniser.tokenise(&sample.instance)?;
    let (primary, prediction) = up_pass(g, nets, &tokens)?;
    let loss_value = sample.loss.value(&prediction)?;
    if !loss_value.is_finite() {
        return Err(XPropError::NonFiniteLoss(loss_value));
    }
    let comp = down_pass(g, nets, &primary, mode, sm_seed)?;
    let pass = compute_gradients(g, nets, &primary, &comp, &sample.loss, mode)?;
    opt.apply(nets, &pass.grads)?;
    let local_disagreement = disagreement(&pass.local, g.root());
    Ok(TrialResult { prediction, loss_value, grads: pass.grads, local: pass.local, local_disagreement })
}

/// A graph, its networks and an optimizer, trained trial by trial.
#[derive(Clone, Debug)]
pub struct XProp {
    pub graph: ExnetGraph,
    pub bundle: NetworkBundle,
    pub tokeniser: Tokeniser,
    pub optimizer: Optimizer,
    pub mode: Mode,
    pub sm_seed: u64,
}

impl XProp {
    pub fn new(
        graph: ExnetGraph,
        bundle: NetworkBundle,
        tokeniser: Tokeniser,
        optimizer: Optimizer,
        mode: Mode,
        sm_seed: u64,
    ) -> Result<XProp> {
        ensure_valid(&graph)?;
        if tokeniser.leaf_count() != graph.leaves().len() {
            return Err(XPropError::TokenCount { expected: graph.leaves().len(), got: tokeniser.leaf_count() });
        }
        if tokeniser.d_p() != bundle.dims().primary {
            return Err(NeuralError::Dim { expected: bundle.dims().primary, got: tokeniser.d_p() }.into());
        }
        Ok(XProp { graph, bundle, tokeniser, optimizer, mode, sm_seed })
    }

    pub fn predict(&self, instance: &[f64]) -> Result<Vec<f64>> {
        let tokens = self.tokeniser.tokenise(instance)?;
        Ok(up_pass(&self.graph, &self.bundle, &tokens)?.1)
    }

    /// Runs trial number `trial` on `sample`.
    pub fn step(&mut self, trial: u64, sample: &Sample) -> Result<TrialResult> {
        run_trial(
            &self.graph,
            &mut self.bundle,
            &self.tokeniser,
            sample,
            &mut self.optimizer,
            self.mode,
            mix(self.sm_seed, trial),
        )
    }

    /// Draws trial `trial` from `task` and runs it.
    pub fn run_trial(&mut self, task: &TaskSpec, trial: u64) -> Result<TrialResult> {
        let sample = task.sample(trial);
        self.step(trial, &sample)
    }

    /// Local predictions for `instance` after a fresh up and down pass.
    pub fn local_predictions(&self, instance: &[f64], trial: u64) -> Result<BTreeMap<VertexId, Vec<f64>>> {
        let tokens = self.tokeniser.tokenise(instance)?;
        let (primary, _) = up_pass(&self.graph, &self.bundle, &tokens)?;
        let comp = down_pass(&self.graph, &self.bundle, &primary, self.mode, mix(self.sm_seed, trial))?;
        local_predictions(&self.graph, &self.bundle, &primary, &comp)
    }
}
