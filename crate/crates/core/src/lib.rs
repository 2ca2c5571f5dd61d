//! N:M structured sparsity masks learned with Gumbel-softmax sampling.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod bytes;
pub mod gumbel;
pub mod mask;
pub mod models;
pub mod optim;
pub mod pruners;
pub mod scalar;
pub mod seeds;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use mask::{LayerMask, MaskCandidateSet, Pattern};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use trainer::{train_masks, transfer_masks, MaskTrainer, TrainConfig};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Distribution32 = gumbel::MaskDistribution<f32>;
pub type Distribution64 = gumbel::MaskDistribution<f64>;
pub type TransformerLm32 = models::TransformerLm<f32>;
pub type TransformerLm64 = models::TransformerLm<f64>;
pub type Sparse24F32 = sparse::Sparse24Matrix<f32>;
pub type Sparse24F64 = sparse::Sparse24Matrix<f64>;
