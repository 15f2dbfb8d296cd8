//! XProp-A: training over a finite set with cached extraction tables.
//!
//! Each epoch retrains one internal vertex from scratch against the cached
//! extractions of its neighbours, then rewrites that vertex's table rows.
//! An aeon runs one epoch per internal vertex, children first, after which
//! the cached primary extractions agree with a fresh up pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{ExnetGraph, VertexId};
use crate::metrics::MetricsRow;
use crate::neural::{concat, GradSet, GroupId, NetworkBundle, NeuralError, Optimizer, Role};
use crate::seed::{mix, mix2};
use crate::tasks::{LossFn, Tokeniser, TrainingSet};
use crate::xprop::{down_pass, up_pass, Mode, Result, XPropError};

/// Cached extractions per (vertex, training instance).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionTable {
    /// `alpha[v][x]`, defined for every vertex.
    pub alpha: Vec<Vec<Vec<f64>>>,
    /// `beta[v][x]`, defined for internal vertices; empty for leaves.
    pub beta: Vec<Vec<Vec<f64>>>,
}

impl ExtractionTable {
    /// Leaves from the tokeniser, everything else from one up pass and one
    /// DM down pass with the bundle's current parameters.
    pub fn initial(g: &ExnetGraph, nets: &NetworkBundle, tokeniser: &Tokeniser, set: &TrainingSet) -> Result<Self> {
        if set.is_empty() {
            return Err(XPropError::MissingCache("empty training set".into()));
        }
        let n = g.vertex_count();
        let mut alpha = vec![Vec::with_capacity(set.len()); n];
        let mut beta = vec![Vec::new(); n];
        for sample in &set.samples {
            let tokens = tokeniser.tokenise(&sample.instance)?;
            let (primary, _) = up_pass(g, nets, &tokens)?;
            let comp = down_pass(g, nets, &primary, Mode::Dm, 0)?;
            for v in g.vertices() {
                alpha[v.index()].push(primary.alpha[v.index()].clone());
                if g.is_internal(v) {
                    beta[v.index()].push(comp.vertex(v)?.to_vec());
                }
            }
        }
        Ok(ExtractionTable { alpha, beta })
    }

    pub fn instance_count(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    pub fn alpha(&self, v: VertexId, x: usize) -> &[f64] {
        &self.alpha[v.index()][x]
    }

    pub fn beta(&self, v: VertexId, x: usize) -> Result<&[f64]> {
        self.beta[v.index()]
            .get(x)
            .map(Vec::as_slice)
            .ok_or_else(|| XPropError::MissingCache(format!("beta table entry ({v}, {x})")))
    }
}

/// One epoch: which vertex, how many trials, and the seed its reset and
/// sampling derive from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EpochPlan {
    pub vertex: VertexId,
    pub trials: usize,
    pub reset_seed: u64,
}

/// Internal vertices ordered so every vertex follows both its children.
pub fn aeon_schedule(g: &ExnetGraph) -> Vec<VertexId> {
    g.up_order().iter().copied().filter(|&v| g.is_internal(v)).collect()
}

/// Parameter groups an epoch on `v` resets and trains.
pub fn epoch_groups(g: &ExnetGraph, nets: &NetworkBundle, v: VertexId) -> Vec<GroupId> {
    let mut out =
        vec![nets.primary_group(v).expect("internal vertex"), nets.trainer_group(v).expect("internal vertex")];
    out.extend(g.parent_arcs(v).iter().map(|&a| nets.complementary_group(a).expect("arc into internal vertex")));
    out
}

fn comp_sum(g: &ExnetGraph, nets: &NetworkBundle, tables: &ExtractionTable, v: VertexId, x: usize) -> Result<Vec<f64>> {
    let gnet = nets.net(Role::Complementary);
    let mut acc: Option<Vec<f64>> = None;
    for &a in g.parent_arcs(v) {
        let z = g.arc(a).src;
        let out = gnet.forward2(nets.complementary_params(a), tables.beta(z, x)?, tables.alpha(g.arc_sibling(a), x))?;
        match acc.as_mut() {
            None => acc = Some(out),
            Some(s) => s.iter_mut().zip(&out).for_each(|(s, o)| *s += o),
        }
    }
    Ok(acc.unwrap_or_else(|| vec![0.0; nets.dims().complementary]))
}

/// Loss and gradients of the epoch objective at `v` for instance `x`.
pub fn epoch_gradients(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    tables: &ExtractionTable,
    v: VertexId,
    x: usize,
    loss: &dyn LossFn,
) -> Result<(f64, Vec<f64>, GradSet)> {
    let d_p = nets.dims().primary;
    let (f, gn, t) = (nets.net(Role::Primary), nets.net(Role::Complementary), nets.net(Role::Trainer));
    let (l, r) = g.children(v).expect("internal vertex");
    let theta_p = nets.primary_params(v);
    let f_trace = f.trace(theta_p, &concat(tables.alpha(l, x), tables.alpha(r, x)))?;

    let mut g_traces = Vec::new();
    let mut beta = vec![0.0; nets.dims().complementary];
    for (i, &a) in g.parent_arcs(v).iter().enumerate() {
        let z = g.arc(a).src;
        let tr =
            gn.trace(nets.complementary_params(a), &concat(tables.beta(z, x)?, tables.alpha(g.arc_sibling(a), x)))?;
        if i == 0 {
            beta.copy_from_slice(tr.output());
        } else {
            beta.iter_mut().zip(tr.output()).for_each(|(s, o)| *s += o);
        }
        g_traces.push((a, tr));
    }

    let theta_t = nets.trainer_params(v);
    let t_trace = t.trace(theta_t, &concat(f_trace.output(), &beta))?;
    let y = t_trace.output().to_vec();
    let value = loss.value(&y)?;
    if !value.is_finite() {
        return Err(XPropError::NonFiniteLoss(value));
    }
    let dy = loss.grad(&y)?;

    let mut grads = GradSet::new();
    let tg = nets.trainer_group(v).expect("internal vertex");
    let d_in = t.backward_from_trace(theta_t, &t_trace, &dy, grads.slot(tg, t.param_count()))?;
    let (d_alpha, d_beta) = d_in.split_at(d_p);
    let pg = nets.primary_group(v).expect("internal vertex");
    f.backward_from_trace(theta_p, &f_trace, d_alpha, grads.slot(pg, f.param_count()))?;
    for (a, tr) in &g_traces {
        let cg = nets.complementary_group(*a).expect("arc into internal vertex");
        gn.backward_from_trace(nets.complementary_params(*a), tr, d_beta, grads.slot(cg, gn.param_count()))?;
    }
    Ok((value, y, grads))
}

/// Per-trial record of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrial {
    pub instance: usize,
    pub loss: f64,
    pub prediction_norm: f64,
    pub grad_norm: f64,
}

/// Resets the epoch's groups (parameters and optimizer state) and trains
/// them for `plan.trials` uniformly drawn instances. Only the groups of
/// `plan.vertex` and its parent arcs change.
pub fn run_epoch(
    plan: &EpochPlan,
    g: &ExnetGraph,
    nets: &mut NetworkBundle,
    tables: &ExtractionTable,
    set: &TrainingSet,
    opt: &mut Optimizer,
) -> Result<Vec<EpochTrial>> {
    let v = plan.vertex;
    if !g.is_internal(v) {
        return Err(XPropError::MissingCache(format!("epoch vertex {v} is a leaf")));
    }
    if tables.instance_count() != set.len() {
        return Err(XPropError::MissingCache(format!(
            "tables hold {} instances, training set has {}",
            tables.instance_count(),
            set.len()
        )));
    }
    for gid in epoch_groups(g, nets, v) {
        nets.reset_group(gid, mix(plan.reset_seed, gid.0 as u64));
        opt.reset_group(gid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(plan.reset_seed, v.0 as u64, u64::MAX));
    let mut out = Vec::with_capacity(plan.trials);
    for _ in 0..plan.trials {
        let x = rng.gen_range(0..set.len());
        let (value, y, grads) = epoch_gradients(g, nets, tables, v, x, &set.samples[x].loss)?;
        opt.apply(nets, &grads)?;
        out.push(EpochTrial {
            instance: x,
            loss: value,
            prediction_norm: y.iter().map(|a| a * a).sum::<f64>().sqrt(),
            grad_norm: grads.norm(),
        });
    }
    Ok(out)
}

/// Rewrites the table rows of `v` from its current parameters.
pub fn finalize_epoch(g: &ExnetGraph, nets: &NetworkBundle, tables: &mut ExtractionTable, v: VertexId) -> Result<()> {
    let (l, r) = g.children(v).expect("internal vertex");
    let f = nets.net(Role::Primary);
    for x in 0..tables.instance_count() {
        let a = f.forward2(nets.primary_params(v), tables.alpha(l, x), tables.alpha(r, x))?;
        let b = comp_sum(g, nets, tables, v, x)?;
        tables.alpha[v.index()][x] = a;
        tables.beta[v.index()][x] = b;
    }
    Ok(())
}

/// Outcome of comparing the cached primary extractions against a fresh
/// up pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub aeon: usize,
    pub instances: usize,
    pub mismatches: usize,
    pub max_abs_diff: f64,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    pub fn line(&self) -> String {
        format!(
            "aeon {} consistency {}: {} mismatched entries over {} instances, max |diff| {:e}",
            self.aeon,
            if self.passed() { "pass" } else { "FAIL" },
            self.mismatches,
            self.instances,
            self.max_abs_diff
        )
    }
}

pub fn check_consistency(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    tokeniser: &Tokeniser,
    set: &TrainingSet,
    tables: &ExtractionTable,
    aeon: usize,
) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport { aeon, instances: set.len(), mismatches: 0, max_abs_diff: 0.0 };
    for (x, sample) in set.samples.iter().enumerate() {
        let (primary, _) = up_pass(g, nets, &tokeniser.tokenise(&sample.instance)?)?;
        for v in g.vertices() {
            for (a, b) in primary.get(v).iter().zip(tables.alpha(v, x)) {
                if a.to_bits() != b.to_bits() {
                    report.mismatches += 1;
                    report.max_abs_diff = report.max_abs_diff.max((a - b).abs());
                }
            }
        }
    }
    Ok(report)
}

/// Mean root loss over the set using fresh up passes.
pub fn mean_loss(g: &ExnetGraph, nets: &NetworkBundle, tokeniser: &Tokeniser, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for s in &set.samples {
        let (_, y) = up_pass(g, nets, &tokeniser.tokenise(&s.instance)?)?;
        total += s.loss.value(&y)?;
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AeonConfig {
    pub aeons: usize,
    pub epoch_trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AeonSummary {
    pub aeon: usize,
    pub mean_loss: f64,
    pub consistency: ConsistencyReport,
}

/// State of an XProp-A run.
#[derive(Clone, Debug)]
pub struct XPropA {
    pub graph: ExnetGraph,
    pub bundle: NetworkBundle,
    pub tokeniser: Tokeniser,
    pub set: TrainingSet,
    pub tables: ExtractionTable,
    pub optimizer: Optimizer,
    trials_run: u64,
}

impl XPropA {
    pub fn new(
        graph: ExnetGraph,
        bundle: NetworkBundle,
        tokeniser: Tokeniser,
        set: TrainingSet,
        optimizer: Optimizer,
    ) -> Result<Self> {
        if bundle.has_sharing() {
            return Err(NeuralError::Sharing("XProp-A does not support shared parameters".into()).into());
        }
        let tables = ExtractionTable::initial(&graph, &bundle, &tokeniser, &set)?;
        Ok(XPropA { graph, bundle, tokeniser, set, tables, optimizer, trials_run: 0 })
    }

    /// Plans of aeon `aeon` (zero-based).
    pub fn plans(&self, aeon: usize, cfg: &AeonConfig) -> Vec<EpochPlan> {
        aeon_schedule(&self.graph)
            .into_iter()
            .map(|v| EpochPlan {
                vertex: v,
                trials: cfg.epoch_trials,
                reset_seed: mix2(cfg.seed, aeon as u64, v.0 as u64),
            })
            .collect()
    }

    /// Runs one aeon, reporting each trial through `on_trial`.
    pub fn run_aeon(
        &mut self,
        aeon: usize,
        cfg: &AeonConfig,
        on_trial: &mut dyn FnMut(MetricsRow),
    ) -> Result<AeonSummary> {
        for plan in self.plans(aeon, cfg) {
            let trials = run_epoch(&plan, &self.graph, &mut self.bundle, &self.tables, &self.set, &mut self.optimizer)?;
            for t in trials {
                self.trials_run += 1;
                on_trial(MetricsRow {
                    trial: self.trials_run,
                    loss: t.loss,
                    prediction_norm: t.prediction_norm,
                    grad_norm: t.grad_norm,
                    local_disagreement: None,
                });
            }
            finalize_epoch(&self.graph, &self.bundle, &mut self.tables, plan.vertex)?;
        }
        let consistency = check_consistency(&self.graph, &self.bundle, &self.tokeniser, &self.set, &self.tables, aeon)?;
        let mean_loss = mean_loss(&self.graph, &self.bundle, &self.tokeniser, &self.set)?;
        Ok(AeonSummary { aeon, mean_loss, consistency })
    }

    pub fn run_aeons(&mut self, cfg: &AeonConfig, on_trial: &mut dyn FnMut(MetricsRow)) -> Result<Vec<AeonSummary>> {
        (0..cfg.aeons).map(|a| self.run_aeon(a, cfg, on_trial)).collect()
    }

    pub fn predict(&self, instance: &[f64]) -> Result<Vec<f64>> {
        Ok(up_pass(&self.graph, &self.bundle, &self.tokeniser.tokenise(instance)?)?.1)
    }
}
