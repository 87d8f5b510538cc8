//! Scalar reward head: an MLP over a fused image-text embedding, trained
//! with the Bradley-Terry pairwise loss.
//!
//! `layer_widths[0]` is the input width; each following entry is a hidden
//! width, and a final scalar output is implied. The default
//! `[768, 1024, 128, 64, 16]` therefore has five weight matrices
//! `768→1024→128→64→16→1`. Hidden layers use the configured activation;
//! `dropout_rates[i]` applies (inverted dropout) after hidden layer `i`
//! during training only. All arithmetic is `f64`.

pub mod checkpoint;
mod kernels;
pub mod loss;
pub mod optim;
pub mod train;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{pair_loss, pair_loss_from_delta, PairLoss};
pub use optim::AdamW;
pub use train::{train, PairData, TrainConfig, TrainLog, TrainLogEntry, Trainer};

use crate::rng;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("InvalidArchitecture: {0}")]
    InvalidArchitecture(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("DimensionMismatch: head expects input width {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("NonFiniteActivation: layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("NonFiniteLoss: delta = {delta}")]
    NonFiniteLoss { delta: f64 },
    #[error("MissingEmbedding: {count} pair(s) lack embeddings, e.g. {}", examples.join(", "))]
    MissingEmbedding { count: usize, examples: Vec<String> },
    #[error("DivergedTraining: non-finite loss at update {update}")]
    DivergedTraining {
        update: u64,
        last_finite: Box<Checkpoint>,
    },
    #[error("IncompatibleArchitecture: expected {expected}, checkpoint has {found}")]
    IncompatibleArchitecture { expected: String, found: String },
    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("EmptyTrainingSet: no training pairs")]
    EmptyTrainingSet,
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

impl HeadError {
    pub fn name(&self) -> &'static str {
        match self {
            HeadError::InvalidArchitecture(_) => "InvalidArchitecture",
            HeadError::InvalidConfig(_) => "InvalidConfig",
            HeadError::DimensionMismatch { .. } => "DimensionMismatch",
            HeadError::NonFiniteActivation { .. } => "NonFiniteActivation",
            HeadError::NonFiniteLoss { .. } => "NonFiniteLoss",
            HeadError::MissingEmbedding { .. } => "MissingEmbedding",
            HeadError::DivergedTraining { .. } => "DivergedTraining",
            HeadError::IncompatibleArchitecture { .. } => "IncompatibleArchitecture",
            HeadError::CorruptCheckpoint(_) => "CorruptCheckpoint",
            HeadError::EmptyTrainingSet => "EmptyTrainingSet",
            HeadError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(HeadError::InvalidArchitecture(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadArchitecture {
    pub layer_widths: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for HeadArchitecture {
    fn default() -> Self {
        HeadArchitecture {
            layer_widths: vec![768, 1024, 128, 64, 16],
            dropout_rates: vec![0.2, 0.2, 0.1],
            activation: Activation::Relu,
        }
    }
}

impl HeadArchitecture {
    /// The default head with a different input width.
    pub fn default_for_input(input_dim: usize) -> Self {
        let mut a = Self::default();
        a.layer_widths[0] = input_dim;
        a
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    /// Number of weight matrices.
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len()
    }

    /// `(in, out)` for each weight matrix.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = self.layer_widths.clone();
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn dropout_after(&self, hidden_layer: usize) -> f64 {
        self.dropout_rates.get(hidden_layer).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.layer_widths.is_empty() {
            return Err(HeadError::InvalidArchitecture("no layers".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(HeadError::InvalidArchitecture("widths must be >= 1".into()));
        }
        if self.dropout_rates.len() >= self.layer_widths.len() {
            return Err(HeadError::InvalidArchitecture(format!(
                "{} dropout rates for {} layers",
                self.dropout_rates.len(),
                self.layer_widths.len()
            )));
        }
        if let Some(p) = self.dropout_rates.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(HeadError::InvalidArchitecture(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "widths {:?} dropout {:?} {:?}",
            self.layer_widths, self.dropout_rates, self.activation
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

/// Weights and biases of every layer. Gradients and optimizer moments use
/// the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub layers: Vec<Dense>,
}

impl HeadParameters {
    pub fn zeros(arch: &HeadArchitecture) -> Self {
        HeadParameters {
            layers: arch
                .shapes()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    /// Uniform fan-in scaled initialisation: weights `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: &HeadArchitecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = rng::stream(seed, rng::Domain::Init, 0);
        for layer in &mut p.layers {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weight {
                *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Buffers in canonical order: layer by layer, weight then bias.
    pub fn buffers(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for b in self.buffers() {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn from_flat(arch: &HeadArchitecture, flat: &[f64]) -> Option<Self> {
        let mut p = Self::zeros(arch);
        if flat.len() != p.parameter_count() {
            return None;
        }
        let mut at = 0;
        for b in p.buffers_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Some(p)
    }

    pub fn all_finite(&self) -> bool {
        self.buffers().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, arch: &HeadArchitecture) -> bool {
        let shapes = arch.shapes();
        shapes.len() == self.layers.len()
            && shapes
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.in_dim == i && l.out_dim == o)
    }
}

/// A reward head ready for inference: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    arch: HeadArchitecture,
    params: HeadParameters,
}

/// Dropout behaviour for one forward pass.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// How masks are drawn when a batch holds `n` preferred rows followed by
/// `n` dispreferred rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MaskPolicy {
    Independent,
    /// Rows `i` and `n + i` share one mask.
    SharedPairs,
}

pub(crate) struct ForwardCache {
    rows: usize,
    input: Vec<f64>,
    /// Pre-activation output of every layer, including the final scalar.
    pre: Vec<Vec<f64>>,
    /// Post-activation, post-dropout output of every hidden layer.
    post: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer, when dropout ran.
    masks: Vec<Option<Vec<f64>>>,
}

impl RewardHead {
    pub fn new(arch: HeadArchitecture, params: HeadParameters) -> Result<Self, HeadError> {
        arch.validate()?;
        if !params.matches(&arch) {
            return Err(HeadError::IncompatibleArchitecture {
                expected: arch.describe(),
                found: "parameters of a different shape".into(),
            });
        }
        Ok(RewardHead { arch, params })
    }

    pub fn init(arch: HeadArchitecture, seed: u64) -> Result<Self, HeadError> {
        arch.validate()?;
        let params = HeadParameters::init(&arch, seed);
        Ok(RewardHead { arch, params })
    }

    pub fn zeros(arch: HeadArchitecture) -> Result<Self, HeadError> {
        arch.validate()?;
        let params = HeadParameters::zeros(&arch);
        Ok(RewardHead { arch, params })
    }

    pub fn architecture(&self) -> &HeadArchitecture {
        &self.arch
    }

    pub fn parameters(&self) -> &HeadParameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut HeadParameters {
        &mut self.params
    }

    pub fn into_parts(self) -> (HeadArchitecture, HeadParameters) {
        (self.arch, self.params)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    /// Reward for one embedding.
    pub fn forward(&self, embedding: &[f32], mode: ForwardMode<'_>) -> Result<f64, HeadError> {
        self.check_dim(embedding.len())?;
        let x: Vec<f64> = embedding.iter().map(|&v| v as f64).collect();
        self.forward_f64(&x, mode)
    }

    pub fn forward_f64(&self, x: &[f64], mode: ForwardMode<'_>) -> Result<f64, HeadError> {
        self.check_dim(x.len())?;
        let (out, _) = match mode {
            ForwardMode::Eval => self.forward_batch(x.to_vec(), None, false)?,
            ForwardMode::Train(rng) => {
                self.forward_batch(x.to_vec(), Some((rng, MaskPolicy::Independent)), false)?
            }
        };
        Ok(out[0])
    }

    /// Eval-mode rewards for `rows` row-major embeddings. Row results are
    /// identical to scoring each row on its own.
    pub fn score_rows(&self, x: Vec<f64>) -> Result<Vec<f64>, HeadError> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        if !x.len().is_multiple_of(self.input_dim()) {
            return Err(HeadError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len() % self.input_dim(),
            });
        }
        Ok(self.forward_batch(x, None, false)?.0)
    }

    fn check_dim(&self, found: usize) -> Result<(), HeadError> {
        if found != self.input_dim() {
            return Err(HeadError::DimensionMismatch {
                expected: self.input_dim(),
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn forward_batch(
        &self,
        input: Vec<f64>,
        mut dropout: Option<(&mut dyn RngCore, MaskPolicy)>,
        keep_cache: bool,
    ) -> Result<(Vec<f64>, Option<ForwardCache>), HeadError> {
        let rows = input.len() / self.input_dim();
        let n_layers = self.params.layers.len();
        let mut pre_all = Vec::with_capacity(n_layers);
        let mut post_all = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut current: Option<Vec<f64>> = None;

        for (li, layer) in self.params.layers.iter().enumerate() {
            let x = current.as_deref().unwrap_or(&input);
            let mut z = vec![0.0; rows * layer.out_dim];
            kernels::affine_forward(x, layer.in_dim, &layer.weight, &layer.bias, &mut z);

            if li + 1 == n_layers {
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(HeadError::NonFiniteActivation { layer: li });
                }
                let out = z.clone();
                if keep_cache {
                    pre_all.push(z);
                }
                if let Some(prev) = current.take() {
                    if keep_cache {
                        post_all.push(prev);
                    }
                }
                let cache = keep_cache.then_some(ForwardCache {
                    rows,
                    input,
                    pre: pre_all,
                    post: post_all,
                    masks,
                });
                return Ok((out, cache));
            }

            let mut a: Vec<f64> = z.iter().map(|&v| self.arch.activation.apply(v)).collect();
            let rate = self.arch.dropout_after(li);
            let mask = match dropout.as_mut() {
                Some((rng, policy)) if rate > 0.0 => {
                    let m = draw_mask(&mut **rng, *policy, rows, layer.out_dim, rate);
                    for (ai, mi) in a.iter_mut().zip(&m) {
                        *ai *= mi;
                    }
                    Some(m)
                }
                _ => None,
            };
            if a.iter().any(|v| !v.is_finite()) {
                return Err(HeadError::NonFiniteActivation { layer: li });
            }
            if keep_cache {
                pre_all.push(z);
                masks.push(mask);
                if let Some(prev) = current.replace(a) {
                    post_all.push(prev);
                }
            } else {
                current = Some(a);
            }
        }
        unreachable!("a head always has at least one layer")
    }

    /// Backpropagates `d_out` (one value per row) through a cached forward
    /// pass, overwriting `grads`.
    pub(crate) fn backward_batch(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        grads: &mut HeadParameters,
    ) {
        let n_layers = self.params.layers.len();
        let mut delta = d_out.to_vec();
        for li in (0..n_layers).rev() {
            let layer = &self.params.layers[li];
            let x: &[f64] = if li == 0 {
                &cache.input
            } else {
                &cache.post[li - 1]
            };
            let g = &mut grads.layers[li];
            let mut d_x = (li > 0).then(|| vec![0.0; cache.rows * layer.in_dim]);
            kernels::affine_backward(
                x,
                layer.in_dim,
                &layer.weight,
                &delta,
                layer.out_dim,
                &mut g.weight,
                &mut g.bias,
                d_x.as_deref_mut(),
            );
            if let Some(mut d_x) = d_x {
                // Through dropout and the activation of hidden layer li - 1.
                let z = &cache.pre[li - 1];
                let act = self.arch.activation;
                match &cache.masks[li - 1] {
                    Some(m) => {
                        for ((d, &zi), &mi) in d_x.iter_mut().zip(z).zip(m) {
                            *d *= mi * act.derivative(zi);
                        }
                    }
                    None => {
                        for (d, &zi) in d_x.iter_mut().zip(z) {
                            *d *= act.derivative(zi);
                        }
                    }
                }
                delta = d_x;
            }
        }
    }
}

fn draw_mask(
    rng: &mut dyn RngCore,
    policy: MaskPolicy,
    rows: usize,
    width: usize,
    rate: f64,
) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    let mut sample = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    };
    match policy {
        MaskPolicy::Independent => sample(rows * width),
        MaskPolicy::SharedPairs => {
            let half = sample(rows / 2 * width);
            let mut m = half.clone();
            m.extend_from_slice(&half);
            m
        }
    }
}
