//! Small fully-connected networks and the parameter store of an exnet.
//!
//! Every vertex and arc of an exnet carries one of three networks: the
//! primary propagator (children's primary extractions to the vertex's own),
//! the complementary propagator (parent complementary extraction plus the
//! sibling's primary extraction to an arc-level complementary extraction)
//! and the trainer (primary plus complementary extraction to a prediction).
//! All three are plain MLPs evaluated on the concatenation of their two
//! vector arguments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builders::ShareScheme;
use crate::graph::{ArcId, ExnetGraph, VertexId};
use crate::seed::mix;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("non-finite gradient in group {0}")]
    NonFinite(String),
    #[error("unknown parameter group {0}")]
    UnknownGroup(usize),
    #[error("sharing scheme does not match the graph: {0}")]
    Sharing(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NeuralError::Dim { expected, got })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of an MLP. `activation` is used on hidden layers, `output_activation`
/// on the last layer; identity is only accepted for the latter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NeuralError::Spec("all dimensions must be at least 1".into()));
        }
        if !self.hidden_dims.is_empty() && self.activation == Activation::Identity {
            return Err(NeuralError::Spec("identity is only allowed on the final layer".into()));
        }
        Ok(())
    }

    /// Layer widths including input and output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// Offsets of one dense layer inside a flat parameter vector. The weight
/// matrix is stored row-major (`out` rows of `inp` columns) and is followed
/// by the bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub inp: usize,
    pub out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl Layout {
    pub fn of(spec: &MlpSpec) -> Layout {
        let widths = spec.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut off = 0;
        for w in widths.windows(2) {
            let (inp, out) = (w[0], w[1]);
            layers.push(LayerLayout { inp, out, weight_offset: off, bias_offset: off + inp * out });
            off += (inp + 1) * out;
        }
        Layout { layers, total: off }
    }
}

/// A validated MLP shape together with its parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Layout,
}

/// Activations recorded by a forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input followed by every layer's post-activation output.
    outs: Vec<Vec<f64>>,
    /// Every layer's pre-activation.
    pres: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outs.last().expect("trace has at least the input")
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Mlp> {
        spec.validate()?;
        let layout = Layout::of(&spec);
        Ok(Mlp { spec, layout })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn layer_activation(&self, i: usize) -> Activation {
        if i + 1 == self.layout.layers.len() {
            self.spec.output_activation
        } else {
            self.spec.activation
        }
    }

    /// LeCun-uniform weights, U(-sqrt(3/fan_in), sqrt(3/fan_in)), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total];
        for layer in &self.layout.layers {
            let bound = (3.0 / layer.inp as f64).sqrt();
            for w in &mut values[layer.weight_offset..layer.bias_offset] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        ParamVector(values)
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(params, input)?.outs.pop().expect("non-empty"))
    }

    /// Forward pass on the concatenation `[a, b]`.
    pub fn forward2(&self, params: &[f64], a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        self.forward(params, &concat(a, b))
    }

    pub fn trace(&self, params: &[f64], input: &[f64]) -> Result<Trace> {
        check_dim(self.layout.total, params.len())?;
        check_dim(self.spec.input_dim, input.len())?;
        let mut outs = Vec::with_capacity(self.layout.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layout.layers.len());
        outs.push(input.to_vec());
        for (i, layer) in self.layout.layers.iter().enumerate() {
            let act = self.layer_activation(i);
            let x = outs.last().expect("non-empty");
            let mut pre = Vec::with_capacity(layer.out);
            for r in 0..layer.out {
                let row = &params[layer.weight_offset + r * layer.inp..][..layer.inp];
                let mut acc = params[layer.bias_offset + r];
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                pre.push(acc);
            }
            let out = pre.iter().map(|&p| act.apply(p)).collect();
            pres.push(pre);
            outs.push(out);
        }
        Ok(Trace { outs, pres })
    }

    /// Reverse-mode gradients of `<upstream, forward(params, input)>` with
    /// respect to the parameters and the input.
    pub fn backward(&self, params: &[f64], input: &[f64], upstream: &[f64]) -> Result<(GradVector, Vec<f64>)> {
        let trace = self.trace(params, input)?;
        let mut grad = vec![0.0; self.layout.total];
        let input_grad = self.backward_from_trace(params, &trace, upstream, &mut grad)?;
        Ok((GradVector(grad), input_grad))
    }

    /// Backward pass over a recorded trace. Parameter gradients are added
    /// into `grad_acc`; the input gradient is returned.
    pub fn backward_from_trace(
        &self,
        params: &[f64],
        trace: &Trace,
        upstream: &[f64],
        grad_acc: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_dim(self.spec.output_dim, upstream.len())?;
        check_dim(self.layout.total, grad_acc.len())?;
        let mut delta: Vec<f64> = upstream.to_vec();
        for (i, layer) in self.layout.layers.iter().enumerate().rev() {
            let act = self.layer_activation(i);
            let pre = &trace.pres[i];
            let out = &trace.outs[i + 1];
            let x = &trace.outs[i];
            for r in 0..layer.out {
                delta[r] *= act.slope(pre[r], out[r]);
            }
            let mut next = vec![0.0; layer.inp];
            for r in 0..layer.out {
                let d = delta[r];
                grad_acc[layer.bias_offset + r] += d;
                let base = layer.weight_offset + r * layer.inp;
                for c in 0..layer.inp {
                    grad_acc[base + c] += d * x[c];
                    next[c] += params[base + c] * d;
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

pub(crate) fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradVector(pub Vec<f64>);

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for GradVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Dimensions shared by every network in an exnet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    /// Primary extraction dimension.
    pub primary: usize,
    /// Complementary extraction dimension.
    pub complementary: usize,
    /// Prediction dimension.
    pub output: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Output activation of the two propagators. The trainer's output is
    /// always linear.
    pub extraction_activation: Activation,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            primary: 8,
            complementary: 8,
            output: 1,
            hidden: vec![32],
            activation: Activation::Tanh,
            extraction_activation: Activation::Tanh,
        }
    }
}

impl NetDims {
    fn mlp(&self, input: usize, output: usize, out_act: Activation) -> Result<Mlp> {
        Mlp::new(MlpSpec {
            input_dim: input,
            hidden_dims: self.hidden.clone(),
            output_dim: output,
            activation: self.activation,
            output_activation: out_act,
        })
    }

    pub fn primary_net(&self) -> Result<Mlp> {
        self.mlp(2 * self.primary, self.primary, self.extraction_activation)
    }

    pub fn complementary_net(&self) -> Result<Mlp> {
        self.mlp(self.complementary + self.primary, self.complementary, self.extraction_activation)
    }

    pub fn trainer_net(&self) -> Result<Mlp> {
        self.mlp(self.primary + self.complementary, self.output, Activation::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Complementary,
    Trainer,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Primary, Role::Complementary, Role::Trainer];

    pub fn name(self) -> &'static str {
        match self {
            Role::Primary => "primary",
            Role::Complementary => "complementary",
            Role::Trainer => "trainer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub u32);

impl GroupId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub role: Role,
    pub params: ParamVector,
}

/// All parameters of one exnet: a primary propagator and trainer per
/// internal vertex, a complementary propagator per arc into an internal
/// vertex. Keys that share parameters point at one group.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBundle {
    dims: NetDims,
    primary: Mlp,
    complementary: Mlp,
    trainer: Mlp,
    groups: Vec<ParamGroup>,
    vertex_primary: Vec<Option<GroupId>>,
    vertex_trainer: Vec<Option<GroupId>>,
    arc_complementary: Vec<Option<GroupId>>,
    init_seed: u64,
}

impl NetworkBundle {
    /// Allocates and initializes parameters for `graph` under `sharing`.
    /// Group `g` is initialized from a seed derived from `(seed, g)`.
    pub fn new(graph: &ExnetGraph, sharing: &ShareScheme, dims: NetDims, seed: u64) -> Result<Self> {
        let primary = dims.primary_net()?;
        let complementary = dims.complementary_net()?;
        let trainer = dims.trainer_net()?;

        let mut groups: Vec<ParamGroup> = Vec::new();
        let mut index: BTreeMap<(Role, String), GroupId> = BTreeMap::new();
        let mut intern = |role: Role, name: &str, groups: &mut Vec<ParamGroup>| -> GroupId {
            *index.entry((role, name.to_string())).or_insert_with(|| {
                groups.push(ParamGroup { name: name.to_string(), role, params: ParamVector(Vec::new()) });
                GroupId((groups.len() - 1) as u32)
            })
        };

        let mut vertex_primary = vec![None; graph.vertex_count()];
        let mut vertex_trainer = vec![None; graph.vertex_count()];
        for v in graph.vertices() {
            let named = sharing.vertex_group(v);
            match (graph.is_internal(v), named) {
                (true, Some(name)) => {
                    vertex_primary[v.index()] = Some(intern(Role::Primary, name, &mut groups));
                    vertex_trainer[v.index()] = Some(intern(Role::Trainer, name, &mut groups));
                }
                (true, None) => return Err(NeuralError::Sharing(format!("internal vertex {v} has no group"))),
                (false, Some(_)) => return Err(NeuralError::Sharing(format!("leaf {v} must not carry a group"))),
                (false, None) => {}
            }
        }
        let mut arc_complementary = vec![None; graph.arc_count()];
        for (a, arc) in graph.arcs() {
            let named = sharing.arc_group(a);
            match (graph.is_internal(arc.dst), named) {
                (true, Some(name)) => {
                    arc_complementary[a.index()] = Some(intern(Role::Complementary, name, &mut groups));
                }
                (true, None) => return Err(NeuralError::Sharing(format!("arc {a} has no group"))),
                (false, Some(_)) => {
                    return Err(NeuralError::Sharing(format!("arc {a} into a leaf must not carry a group")))
                }
                (false, None) => {}
            }
        }

        let mut bundle = NetworkBundle {
            dims,
            primary,
            complementary,
            trainer,
            groups,
            vertex_primary,
            vertex_trainer,
            arc_complementary,
            init_seed: seed,
        };
        for g in 0..bundle.groups.len() {
            bundle.reset_group(GroupId(g as u32), mix(seed, g as u64));
        }
        Ok(bundle)
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn net(&self, role: Role) -> &Mlp {
        match role {
            Role::Primary => &self.primary,
            Role::Complementary => &self.complementary,
            Role::Trainer => &self.trainer,
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, g: GroupId) -> &ParamGroup {
        &self.groups[g.index()]
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> {
        (0..self.groups.len() as u32).map(GroupId)
    }

    pub fn params_mut(&mut self, g: GroupId) -> &mut Vec<f64> {
        &mut self.groups[g.index()].params.0
    }

    pub fn primary_group(&self, v: VertexId) -> Option<GroupId> {
        self.vertex_primary.get(v.index()).copied().flatten()
    }

    pub fn trainer_group(&self, v: VertexId) -> Option<GroupId> {
        self.vertex_trainer.get(v.index()).copied().flatten()
    }

    pub fn complementary_group(&self, a: ArcId) -> Option<GroupId> {
        self.arc_complementary.get(a.index()).copied().flatten()
    }

    /// Parameters of the primary propagator on `v`. Panics on leaves.
    pub fn primary_params(&self, v: VertexId) -> &[f64] {
        &self.groups[self.primary_group(v).expect("internal vertex").index()].params
    }

    pub fn trainer_params(&self, v: VertexId) -> &[f64] {
        &self.groups[self.trainer_group(v).expect("internal vertex").index()].params
    }

    pub fn complementary_params(&self, a: ArcId) -> &[f64] {
        &self.groups[self.complementary_group(a).expect("arc into internal vertex").index()].params
    }

    /// Reinitializes one group from `seed`.
    pub fn reset_group(&mut self, g: GroupId, seed: u64) {
        let role = self.groups[g.index()].role;
        self.groups[g.index()].params = self.net(role).init_params(seed);
    }

    /// True when some group backs more than one vertex or arc.
    pub fn has_sharing(&self) -> bool {
        let mut count = vec![0usize; self.groups.len()];
        for g in self.vertex_primary.iter().chain(&self.vertex_trainer).chain(&self.arc_complementary).flatten() {
            count[g.index()] += 1;
        }
        count.iter().any(|&c| c > 1)
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.params.len()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.dims.clone(),
            groups: self
                .groups
                .iter()
                .map(|g| CheckpointGroup {
                    name: g.name.clone(),
                    role: g.role,
                    layout: self.net(g.role).layout().clone(),
                    values: g.params.0.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites all parameters from a checkpoint taken of a bundle with
    /// the same dims and group structure.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        if ck.dims != self.dims || ck.groups.len() != self.groups.len() {
            return Err(NeuralError::Checkpoint("shape does not match this bundle".into()));
        }
        for (g, c) in self.groups.iter().zip(&ck.groups) {
            if g.name != c.name || g.role != c.role || c.values.len() != g.params.len() {
                return Err(NeuralError::Checkpoint(format!("group {} does not match", c.name)));
            }
        }
        for (g, c) in self.groups.iter_mut().zip(&ck.groups) {
            g.params.0.clone_from(&c.values);
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "exnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointGroup {
    pub name: String,
    pub role: Role,
    pub layout: Layout,
    pub values: Vec<f64>,
}

/// Structured-text (JSON) dump of every parameter group. Floats are written
/// in shortest round-trip form, so save/load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: NetDims,
    pub groups: Vec<CheckpointGroup>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Checkpoint> {
        serde_json::from_str(s).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-group gradients. Contributions for a group are summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    grads: BTreeMap<GroupId, Vec<f64>>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A zero gradient for every group in the bundle.
    pub fn zeros(bundle: &NetworkBundle) -> Self {
        let grads = bundle.group_ids().map(|g| (g, vec![0.0; bundle.group(g).params.len()])).collect();
        GradSet { grads }
    }

    /// Mutable accumulator for `g`, created zeroed if absent.
    pub fn slot(&mut self, g: GroupId, len: usize) -> &mut [f64] {
        self.grads.entry(g).or_insert_with(|| vec![0.0; len])
    }

    pub fn accumulate(&mut self, g: GroupId, grad: &[f64]) {
        let acc = self.slot(g, grad.len());
        for (a, x) in acc.iter_mut().zip(grad) {
            *a += x;
        }
    }

    pub fn get(&self, g: GroupId) -> Option<&[f64]> {
        self.grads.get(&g).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, g: GroupId) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(&g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &[f64])> {
        self.grads.iter().map(|(g, v)| (*g, v.as_slice()))
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.grads.values_mut().flatten() {
            *x *= s;
        }
    }

    pub fn add(&mut self, other: &GradSet) {
        for (g, v) in other.iter() {
            self.accumulate(g, v);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// SGD or Adam over the groups of a [`NetworkBundle`]. Adam keeps its
/// moments and step counter per group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    moments: BTreeMap<GroupId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, moments: BTreeMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    /// Forgets Adam state for `g`.
    pub fn reset_group(&mut self, g: GroupId) {
        self.moments.remove(&g);
    }

    /// One step on every group present in `grads`. Nothing is modified if
    /// any gradient entry is non-finite.
    pub fn apply(&mut self, bundle: &mut NetworkBundle, grads: &GradSet) -> Result<()> {
        for (g, v) in grads.iter() {
            if g.index() >= bundle.groups.len() {
                return Err(NeuralError::UnknownGroup(g.index()));
            }
            check_dim(bundle.group(g).params.len(), v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(NeuralError::NonFinite(bundle.group(g).name.clone()));
            }
        }
        for (g, grad) in grads.iter() {
            let params = &mut bundle.groups[g.index()].params.0;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, d) in params.iter_mut().zip(grad) {
                        *p -= self.lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let st = self.moments.entry(g).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        step: 0,
                    });
                    st.step += 1;
                    let c1 = 1.0 - beta1.powi(st.step as i32);
                    let c2 = 1.0 - beta2.powi(st.step as i32);
                    for i in 0..grad.len() {
                        let d = grad[i];
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * d;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * d * d;
                        let mh = st.m[i] / c1;
                        let vh = st.v[i] / c2;
                        params[i] -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Convenience wrapper for [`Optimizer::apply`].
pub fn apply_update(bundle: &mut NetworkBundle, grads: &GradSet, opt: &mut Optimizer) -> Result<()> {
    opt.apply(bundle, grads)
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
