//! Desk-scale toolkit for domain-adaptive MLM pretraining and
//! text-classification fine-tuning.
//!
//! Pipeline: corpus ingestion → WordPiece vocabulary induction →
//! sequence packing and masking → transformer encoder training
//! (BASE / TAPT / DAPT / DAPT+TAPT strategies) → multi-seed
//! evaluation and delta reporting.
//!
//! Core numerics are generic over the scalar type ([`Scalar`]):
//! training runs in `f32`, gradient verification in `f64`.

pub mod corpus;
pub mod eval;
pub mod mlm_data;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Model state at training precision.
pub type ModelState32 = model::ModelState<f32>;
/// Model state at gradient-verification precision.
pub type ModelState64 = model::ModelState<f64>;
/// Tensor at training precision.
pub type Tensor32 = Tensor<f32>;
/// Tensor at gradient-verification precision.
pub type Tensor64 = Tensor<f64>;
