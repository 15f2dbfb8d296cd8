//! Versioned JSON run configuration.

use std::path::{Path, PathBuf};

use exnet::builders::{BuilderOutput, BuilderSpec};
use exnet::tasks::{make_task, TaskParams, Tokeniser};
use exnet::{Activation, Mode, NetDims, OptimizerKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub builder: BuilderSpec,
    #[serde(default)]
    pub supernode_width: Option<usize>,
    pub task: TaskConfig,
    pub dims: DimsConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub trials: u64,
    #[serde(default)]
    pub xprop_a: Option<XPropAConfig>,
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_mode() -> Mode {
    Mode::Dm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    #[serde(flatten)]
    pub params: TaskParams,
    /// Instances drawn for XProp-A when the task has no fixed set.
    #[serde(default)]
    pub training_set_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub complementary: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_activation")]
    pub extraction_activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XPropAConfig {
    pub aeons: usize,
    pub epoch_trials: usize,
    #[serde(default = "default_max_set")]
    pub max_training_set: usize,
}

fn default_max_set() -> usize {
    10_000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub task: u64,
    pub sm: u64,
}

impl Seeds {
    /// Three seeds derived from one override value.
    pub fn from_override(n: u64) -> Seeds {
        Seeds { init: exnet::seed::mix(n, 0), task: exnet::seed::mix(n, 1), sm: exnet::seed::mix(n, 2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_flush")]
    pub flush_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir(), flush_every: default_flush() }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

fn default_flush() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_instances")]
    pub instances: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Test hook: perturbs the analytic gradient before comparison.
    #[serde(default)]
    pub fault_injection: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: default_tolerance(),
            step: default_step(),
            instances: default_instances(),
            modes: default_modes(),
            fault_injection: false,
        }
    }
}

fn default_tolerance() -> f64 {
    1e-4
}

fn default_step() -> f64 {
    exnet::audit::DEFAULT_STEP
}

fn default_instances() -> u64 {
    4
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Sm, Mode::Dm]
}

/// Everything a command needs, built and cross-checked.
pub struct Prepared {
    pub config: RunConfig,
    pub built: BuilderOutput,
    pub task: TaskSpec,
    pub tokeniser: Tokeniser,
    pub dims: NetDims,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("parse error: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds the graph and task and checks that they fit together.
    pub fn prepare(self) -> Result<Prepared, CliError> {
        let built =
            self.builder.build_with(self.supernode_width).map_err(|e| CliError::Config(format!("builder: {e}")))?;
        let task = make_task(&self.task.name, &self.task.params, self.seeds.task)
            .map_err(|e| CliError::Config(format!("task: {e}")))?;
        let d_p = self.task.params.d_p;
        let tokeniser = Tokeniser::for_builder(&built, d_p);
        if tokeniser.slot_count() != task.token_count() {
            return Err(CliError::Config(format!(
                "leaf-count mismatch: the graph reads {} token slots but the task has {} tokens",
                tokeniser.slot_count(),
                task.token_count()
            )));
        }
        let dims = NetDims {
            primary: d_p,
            complementary: self.dims.complementary,
            output: task.output_dim(),
            hidden: self.dims.hidden.clone(),
            activation: self.dims.activation,
            extraction_activation: self.dims.extraction_activation,
        };
        dims.trainer_net().map_err(|e| CliError::Config(format!("dims: {e}")))?;
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(CliError::Config(format!("learning rate must be finite and >= 0, got {}", self.optimizer.lr)));
        }
        if let Some(a) = &self.xprop_a {
            let size = task.fixed_set().map(|s| s.len()).or(self.task.training_set_size).unwrap_or(0);
            if size == 0 {
                return Err(CliError::Config("xprop_a needs a fixed task or task.training_set_size".into()));
            }
            if size > a.max_training_set {
                return Err(CliError::Config(format!(
                    "training set of {size} exceeds xprop_a.max_training_set = {}",
                    a.max_training_set
                )));
            }
        }
        Ok(Prepared { config: self, built, task, tokeniser, dims })
    }
}
