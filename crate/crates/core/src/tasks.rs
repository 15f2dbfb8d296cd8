//! Synthetic tasks: instance samplers, tokenisers and differentiable losses.
//!
//! A task realizes a distribution over (instance, loss) pairs. Instances are
//! flat vectors of `slots * d_p` reals; a [`Tokeniser`] cuts them into one
//! primary extraction per leaf. Losses expose a value and an analytic
//! gradient at the prediction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builders::{BuilderOutput, LeafSlot};
use crate::seed::mix;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid task parameters: {0}")]
    Params(String),
    #[error("instance has {got} components but the tokeniser holds only {capacity}")]
    InstanceTooLong { got: usize, capacity: usize },
    #[error("training set: {0}")]
    TrainingSet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

/// A differentiable loss on predictions.
pub trait LossFn {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64]) -> Result<f64>;
    fn grad(&self, y: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `||y - target||^2`
    Squared { target: Vec<f64> },
    /// `-log softmax(y)[class]`
    SoftmaxXent { class: usize, num_classes: usize },
}

pub fn squared_loss(target: Vec<f64>) -> Loss {
    Loss::Squared { target }
}

pub fn softmax_xent_loss(class: usize, num_classes: usize) -> Result<Loss> {
    if class >= num_classes {
        return Err(TaskError::ClassIndex { index: class, classes: num_classes });
    }
    Ok(Loss::SoftmaxXent { class, num_classes })
}

fn softmax(y: &[f64]) -> Vec<f64> {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl LossFn for Loss {
    fn dim(&self) -> usize {
        match self {
            Loss::Squared { target } => target.len(),
            Loss::SoftmaxXent { num_classes, .. } => *num_classes,
        }
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(TaskError::Dim { expected: self.dim(), got: y.len() });
        }
        Ok(match self {
            Loss::Squared { target } => y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum(),
            Loss::SoftmaxXent { class, .. } => {
                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - y[*class]
            }
        })
    }

    fn grad(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim() {
            return Err(TaskError::Dim { expected: self.dim(), got: y.len() });
        }
        Ok(match self {
            Loss::Squared { target } => y.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect(),
            Loss::SoftmaxXent { class, .. } => {
                let mut p = softmax(y);
                p[*class] -= 1.0;
                p
            }
        })
    }
}

/// Maps an instance to one primary extraction per leaf. Leaf `i` reads
/// chunk `chunks[i]` (components `[c*d_p, (c+1)*d_p)`) or gets the zero
/// vector when unbound. Instances shorter than `slots * d_p` are padded
/// with trailing zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokeniser {
    d_p: usize,
    slots: usize,
    chunks: Vec<Option<usize>>,
}

/// Leaf `i` receives components `[i*d_p, (i+1)*d_p)`.
pub fn partition_tokeniser(d_p: usize, leaf_count: usize) -> Tokeniser {
    Tokeniser { d_p, slots: leaf_count, chunks: (0..leaf_count).map(Some).collect() }
}

impl Tokeniser {
    /// Tokeniser for a built exnet, following its leaf bindings.
    pub fn for_builder(out: &BuilderOutput, d_p: usize) -> Tokeniser {
        let chunks = out
            .leaf_binding
            .iter()
            .map(|slot| match *slot {
                LeafSlot::Sequence(i) => Some(i),
                LeafSlot::Pixel { row, col } => {
                    let n = out.image_side.expect("pixel bindings only come from image exnets");
                    Some((row - 1) * n + (col - 1))
                }
                LeafSlot::Null => None,
            })
            .collect();
        Tokeniser { d_p, slots: out.slot_count(), chunks }
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn leaf_count(&self) -> usize {
        self.chunks.len()
    }

    /// Number of `d_p`-sized chunks an instance is expected to hold.
    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn tokenise(&self, instance: &[f64]) -> Result<Vec<Vec<f64>>> {
        let capacity = self.slots * self.d_p;
        if instance.len() > capacity {
            return Err(TaskError::InstanceTooLong { got: instance.len(), capacity });
        }
        Ok(self
            .chunks
            .iter()
            .map(|c| match c {
                None => vec![0.0; self.d_p],
                Some(c) => (0..self.d_p).map(|k| instance.get(c * self.d_p + k).copied().unwrap_or(0.0)).collect(),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub instance: Vec<f64>,
    pub loss: Loss,
}

/// A finite list of (instance, loss) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("training set serializes")
    }

    pub fn from_json(s: &str) -> Result<TrainingSet> {
        serde_json::from_str(s).map_err(|e| TaskError::TrainingSet(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainingSet> {
        TrainingSet::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Tokens per instance.
    pub n: usize,
    /// Primary extraction (token) dimension.
    pub d_p: usize,
    #[serde(default = "one")]
    pub out_dim: usize,
    /// Number of memorized instances.
    #[serde(default)]
    pub k: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
enum TaskKind {
    TokenSum,
    Parity,
    Memorize(TrainingSet),
}

/// A seeded distribution over (instance, loss) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub params: TaskParams,
    pub seed: u64,
    kind: TaskKind,
}

pub const TASK_NAMES: [&str; 3] = ["token_sum_regression", "parity_classification", "memorize_k"];

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Sum of the tokens' first `out_dim` components.
pub fn token_sum_target(instance: &[f64], d_p: usize, out_dim: usize) -> Vec<f64> {
    let mut t = vec![0.0; out_dim];
    for tok in instance.chunks(d_p) {
        for (acc, x) in t.iter_mut().zip(tok) {
            *acc += x;
        }
    }
    t
}

/// Sign of the product of ±1 bits.
pub fn parity_label(bits: &[i8]) -> i8 {
    if bits.iter().filter(|&&b| b < 0).count() % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Parity token: the bit in component 0, a one-hot position tag after it.
pub fn parity_instance(bits: &[i8], d_p: usize) -> Vec<f64> {
    let mut x = vec![0.0; bits.len() * d_p];
    for (i, &b) in bits.iter().enumerate() {
        x[i * d_p] = b as f64;
        x[i * d_p + 1 + i] = 1.0;
    }
    x
}

pub fn make_task(name: &str, params: &TaskParams, seed: u64) -> Result<TaskSpec> {
    if params.n == 0 || params.d_p == 0 || params.out_dim == 0 {
        return Err(TaskError::Params("n, d_p and out_dim must be positive".into()));
    }
    let kind = match name {
        "token_sum_regression" => {
            if params.out_dim > params.d_p {
                return Err(TaskError::Params("out_dim cannot exceed d_p".into()));
            }
            TaskKind::TokenSum
        }
        "parity_classification" => {
            if params.d_p < params.n + 1 {
                return Err(TaskError::Params(format!(
                    "parity needs d_p >= n + 1 for positional tags (d_p={}, n={})",
                    params.d_p, params.n
                )));
            }
            TaskKind::Parity
        }
        "memorize_k" => {
            let k =
                params.k.filter(|&k| k > 0).ok_or_else(|| TaskError::Params("memorize_k needs a positive k".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
            let samples = (0..k)
                .map(|_| {
                    let instance = uniform_vec(&mut rng, params.n * params.d_p);
                    let target = uniform_vec(&mut rng, params.out_dim);
                    Sample { instance, loss: squared_loss(target) }
                })
                .collect();
            TaskKind::Memorize(TrainingSet { samples })
        }
        other => return Err(TaskError::UnknownTask(other.to_string())),
    };
    Ok(TaskSpec { name: name.to_string(), params: params.clone(), seed, kind })
}

impl TaskSpec {
    pub fn token_count(&self) -> usize {
        self.params.n
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Parity => 2,
            _ => self.params.out_dim,
        }
    }

    pub fn fixed_set(&self) -> Option<&TrainingSet> {
        match &self.kind {
            TaskKind::Memorize(set) => Some(set),
            _ => None,
        }
    }

    /// Draw number `trial`. Draws are independent across trials and depend
    /// only on `(seed, trial)`.
    pub fn sample(&self, trial: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, trial));
        let (n, d_p) = (self.params.n, self.params.d_p);
        match &self.kind {
            TaskKind::TokenSum => {
                let instance = uniform_vec(&mut rng, n * d_p);
                let target = token_sum_target(&instance, d_p, self.params.out_dim);
                Sample { instance, loss: squared_loss(target) }
            }
            TaskKind::Parity => {
                let bits: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
                let class = usize::from(parity_label(&bits) > 0);
                Sample { instance: parity_instance(&bits, d_p), loss: Loss::SoftmaxXent { class, num_classes: 2 } }
            }
            TaskKind::Memorize(set) => set.samples[self.sample_index(trial)].clone(),
        }
    }

    /// For finite tasks, which instance draw `trial` picks.
    pub fn sample_index(&self, trial: u64) -> usize {
        match &self.kind {
            TaskKind::Memorize(set) => ChaCha8Rng::seed_from_u64(mix(self.seed, trial)).gen_range(0..set.len()),
            _ => 0,
        }
    }

    /// The fixed set for finite tasks, otherwise the first `size` draws.
    pub fn training_set(&self, size: usize) -> TrainingSet {
        match &self.kind {
            TaskKind::Memorize(set) => set.clone(),
            _ => TrainingSet { samples: (0..size as u64).map(|t| self.sample(t)).collect() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(loss: &Loss, y: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..y.len())
            .map(|i| {
                let mut a = y.to_vec();
                let mut b = y.to_vec();
                a[i] += h;
                b[i] -= h;
                (loss.value(&a).unwrap() - loss.value(&b).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn audit(loss: &Loss, rng: &mut ChaCha8Rng) {
        let y: Vec<f64> = (0..loss.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = loss.grad(&y).unwrap();
        for (a, b) in g.iter().zip(fd_grad(loss, &y)) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn partition_examples() {
        let t = partition_tokeniser(2, 2);
        assert_eq!(t.tokenise(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t.tokenise(&[0.0; 4]).unwrap(), vec![vec![0.0; 2]; 2]);
        let t = partition_tokeniser(2, 3);
        assert_eq!(
            t.tokenise(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]
        );
        assert!(t.tokenise(&[0.0; 7]).is_err());
    }

    #[test]
    fn squared_examples() {
        let l = squared_loss(vec![1.0, -2.0]);
        assert_eq!(l.value(&[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(l.grad(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let l = squared_loss(vec![0.0, 0.0]);
        assert_eq!(l.value(&[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(l.grad(&[3.0, 4.0]).unwrap(), vec![6.0, 8.0]);
        assert!(l.value(&[1.0]).is_err());
    }

    #[test]
    fn xent_examples() {
        let l = softmax_xent_loss(1, 2).unwrap();
        assert!((l.value(&[0.3, 0.3]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = l.grad(&[2.0, -1.0]).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(softmax_xent_loss(2, 2).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..64 {
            let target: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            audit(&squared_loss(target), &mut rng);
            audit(&softmax_xent_loss(i % 4, 4).unwrap(), &mut rng);
        }
    }

    #[test]
    fn token_sum_zero_instance() {
        assert_eq!(token_sum_target(&[0.0; 8], 2, 2), vec![0.0, 0.0]);
        assert_eq!(token_sum_target(&[1.0, 5.0, 2.0, 7.0], 2, 1), vec![3.0]);
    }

    #[test]
    fn parity_product_sign() {
        assert_eq!(parity_label(&[1, 1, -1]), -1);
        assert_eq!(parity_label(&[-1, 1, -1]), 1);
        let x = parity_instance(&[1, -1], 3);
        assert_eq!(x, vec![1.0, 1.0, 0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn parity_samples_are_consistent() {
        let p = TaskParams { n: 3, d_p: 4, out_dim: 1, k: None };
        let t = make_task("parity_classification", &p, 5).unwrap();
        for trial in 0..50 {
            let s = t.sample(trial);
            let bits: Vec<i8> = s.instance.chunks(4).map(|c| c[0] as i8).collect();
            let Loss::SoftmaxXent { class, num_classes } = s.loss else { panic!() };
            assert_eq!(num_classes, 2);
            assert_eq!(class == 1, parity_label(&bits) == 1);
        }
        let small = TaskParams { n: 4, d_p: 4, out_dim: 1, k: None };
        assert!(make_task("parity_classification", &small, 5).is_err());
    }

    #[test]
    fn memorize_frequencies() {
        let p = TaskParams { n: 2, d_p: 2, out_dim: 1, k: Some(4) };
        let t = make_task("memorize_k", &p, 9).unwrap();
        let draws = 10_000u64;
        let mut counts = [0usize; 4];
        for trial in 0..draws {
            counts[t.sample_index(trial)] += 1;
        }
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * 0.25).abs() <= 3.0 * sigma, "{counts:?}");
        }
        let s = t.sample(3);
        assert_eq!(s, t.fixed_set().unwrap().samples[t.sample_index(3)]);
    }

    #[test]
    fn samplers_reproducible() {
        let p = TaskParams { n: 4, d_p: 3, out_dim: 2, k: None };
        let a = make_task("token_sum_regression", &p, 1).unwrap();
        let b = make_task("token_sum_regression", &p, 1).unwrap();
        let c = make_task("token_sum_regression", &p, 2).unwrap();
        assert_eq!(a.sample(17), b.sample(17));
        assert_ne!(a.sample(17), c.sample(17));
        assert_ne!(a.sample(17), a.sample(18));
        assert!(matches!(make_task("nope", &p, 1), Err(TaskError::UnknownTask(_))));
    }

    #[test]
    fn training_set_round_trip() {
        let p = TaskParams { n: 2, d_p: 2, out_dim: 1, k: Some(3) };
        let t = make_task("memorize_k", &p, 4).unwrap();
        let set = t.training_set(0);
        assert_eq!(TrainingSet::from_json(&set.to_json()).unwrap(), set);
    }
}
