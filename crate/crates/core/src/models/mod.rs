//! Small frozen models and the data they train on.

mod data;
mod io;
mod linear;
mod pretrain;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bytes::FormatError;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use data::{
    decode, encode, eval_batches, synthetic_text, BatchIter, BatchSource, Corpus, Domain, FixedBatches, RegressionBatch, TokenBatch,
};
pub use io::{decode_model, encode_model, MODEL_MAGIC};
pub use linear::{LinearModel, MlpModel};
pub use pretrain::{mean_loss, pretrain_dense, PretrainConfig, PretrainReport};
pub use transformer::TransformerLm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("tensor '{tensor}': input width {width} is not divisible by block size {m}")]
    Indivisible { tensor: String, width: usize, m: usize },
    #[error("data: {0}")]
    Data(String),
    #[error("parameter '{name}': expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("loss diverged at step {step}: {loss} (initial {initial})")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A named weight tensor. Prunable tensors are `[out, in]` matrices whose
/// blocks run along the input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub prunable: bool,
}

/// Observer of the input activations of each prunable projection:
/// `(tensor name, row-major [rows, width] inputs, width)`.
pub type Probe<'a, S> = &'a mut dyn FnMut(&str, &[S], usize);

pub trait Model<S: Scalar>: Send + Sync {
    type Batch;

    fn spec(&self) -> &ModelSpec;
    fn params(&self) -> &[Param<S>];
    fn params_mut(&mut self) -> &mut [Param<S>];

    /// Records the loss of `batch` on `tape`. `weights[i]` stands in for
    /// `params()[i]`, which lets callers substitute masked or frozen values.
    fn forward_loss(
        &self,
        tape: &mut Tape<S>,
        weights: &[Var],
        batch: &Self::Batch,
        probe: Option<Probe<'_, S>>,
    ) -> Result<Var, ModelError>;

    /// Number of loss terms a batch averages over.
    fn batch_weight(&self, batch: &Self::Batch) -> usize;

    fn param_index(&self, name: &str) -> Option<usize> {
        self.params().iter().position(|p| p.name == name)
    }

    fn prunable(&self) -> Vec<(usize, &Param<S>)> {
        self.params().iter().enumerate().filter(|(_, p)| p.prunable).collect()
    }

    /// Loss of `batch` with every parameter as a constant.
    fn loss(&self, batch: &Self::Batch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let l = self.forward_loss(&mut tape, &vars, batch, None)?;
        Ok(tape.scalar(l)?.as_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
    TransformerLm,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
            ModelKind::TransformerLm => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ModelKind::Linear),
            1 => Some(ModelKind::Mlp),
            2 => Some(ModelKind::TransformerLm),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            "transformer_lm" => Ok(ModelKind::TransformerLm),
            _ => Err(format!("unknown model kind '{s}' (linear|mlp|transformer_lm)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
            ModelKind::TransformerLm => "transformer_lm",
        })
    }
}

/// Architecture description. Fields irrelevant to a kind are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_length: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Block size every prunable input width must be divisible by.
    pub block: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_dim,
            output_dim,
            ..Self::transformer(256, 64, 2, 4, 128)
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            output_dim,
            ..Self::transformer(256, 64, 2, 4, 128)
        }
    }

    pub fn transformer(
        vocab_size: usize,
        embed_dim: usize,
        num_layers: usize,
        num_heads: usize,
        context_length: usize,
    ) -> Self {
        Self {
            kind: ModelKind::TransformerLm,
            vocab_size,
            embed_dim,
            num_layers,
            num_heads,
            context_length,
            input_dim: 0,
            hidden_dim: 0,
            output_dim: 0,
            block: 4,
        }
    }

    /// The default desk language model.
    pub fn desk_lm() -> Self {
        Self::transformer(256, 64, 2, 4, 128)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(ModelError::Spec(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos("block", self.block)?;
        let div = |tensor: &str, width: usize| {
            if width % self.block != 0 {
                Err(ModelError::Indivisible {
                    tensor: tensor.to_string(),
                    width,
                    m: self.block,
                })
            } else {
                Ok(())
            }
        };
        match self.kind {
            ModelKind::Linear => {
                pos("input_dim", self.input_dim)?;
                pos("output_dim", self.output_dim)?;
                div("w", self.input_dim)
            }
            ModelKind::Mlp => {
                pos("input_dim", self.input_dim)?;
                pos("hidden_dim", self.hidden_dim)?;
                pos("output_dim", self.output_dim)?;
                div("w1", self.input_dim)?;
                div("w2", self.hidden_dim)
            }
            ModelKind::TransformerLm => {
                pos("vocab_size", self.vocab_size)?;
                pos("embed_dim", self.embed_dim)?;
                pos("num_layers", self.num_layers)?;
                pos("num_heads", self.num_heads)?;
                pos("context_length", self.context_length)?;
                if self.embed_dim % self.num_heads != 0 {
                    return Err(ModelError::Spec(format!(
                        "embed_dim {} is not divisible by num_heads {}",
                        self.embed_dim, self.num_heads
                    )));
                }
                div("layer0.attn.wq", self.embed_dim)?;
                div("layer0.mlp.w2", 4 * self.embed_dim)
            }
        }
    }
}

/// Deterministic Gaussian initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| S::of(dist.sample(&mut self.rng)))
    }
}

pub(crate) fn param<S>(name: impl Into<String>, value: Tensor<S>, prunable: bool) -> Param<S> {
    Param {
        name: name.into(),
        value,
        prunable,
    }
}

/// Checks that `params` has exactly the names and shapes of `reference`.
pub(crate) fn check_params<S: Scalar>(reference: &[Param<S>], params: &[Param<S>]) -> Result<(), ModelError> {
    if reference.len() != params.len() {
        return Err(ModelError::Spec(format!(
            "expected {} parameters, got {}",
            reference.len(),
            params.len()
        )));
    }
    for (r, p) in reference.iter().zip(params) {
        if r.name != p.name {
            return Err(ModelError::Spec(format!("expected parameter '{}', got '{}'", r.name, p.name)));
        }
        if r.value.shape() != p.value.shape() {
            return Err(ModelError::ParamShape {
                name: p.name.clone(),
                expected: r.value.shape().to_vec(),
                got: p.value.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `x · wᵀ`, reporting `x` to the probe under `name` first.
pub(crate) fn project<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    name: &str,
    probe: &mut Option<Probe<'_, S>>,
) -> Result<Var, ModelError> {
    if let Some(p) = probe.as_mut() {
        let width = tape.shape(x)?[1];
        p(name, tape.value(x)?, width);
    }
    Ok(tape.linear(x, w)?)
}
