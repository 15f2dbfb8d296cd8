//! Extraction networks (exnets) and their training algorithms.
//!
//! An exnet is a single-rooted DAG whose vertices and arcs carry small
//! neural networks. Training never backpropagates through the whole graph:
//! vector messages ("extractions") are computed by forward passes in an up
//! sweep and a down sweep, and each component network is then updated by a
//! local gradient step seeded by those messages.
//!
//! * [`graph`]: the DAG, validation, schedules, DAG normalization, DOT output.
//! * [`neural`]: the three MLP roles, the parameter bundle, optimizers, checkpoints.
//! * [`xprop`]: per-trial extraction propagation (up pass, down pass, gradients).
//! * [`xprop_a`]: the epoch/aeon variant with cached extraction tables.
//! * [`builders`]: sequence, image, multi-layer, attention and supernode exnets.
//! * [`tasks`]: synthetic tasks, tokenisers and losses.
//! * [`metrics`]: the per-trial CSV stream.
//! * [`audit`]: finite-difference gradient audits.

pub mod audit;
pub mod builders;
pub mod graph;
pub mod metrics;
pub mod neural;
pub mod seed;
pub mod tasks;
pub mod xprop;
pub mod xprop_a;

pub use builders::{BuilderOutput, LeafSlot, Region, ShareScheme};
pub use graph::{ArcId, Dag, ExnetGraph, GraphBuilder, GraphError, Side, ValidationReport, VertexId};
pub use metrics::{MetricsRow, MetricsWriter};
pub use neural::{Activation, GradSet, GroupId, Mlp, MlpSpec, NetDims, NetworkBundle, Optimizer, OptimizerKind, Role};
pub use tasks::{Loss, LossFn, Sample, TaskSpec, Tokeniser};
pub use xprop::{ComplementaryCache, Mode, PrimaryCache, TrialResult, XProp};
pub use xprop_a::{EpochPlan, ExtractionTable, XPropA};
