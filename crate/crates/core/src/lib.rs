//! Prompt learning and classic fine-tuning over a small masked language model.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod autodiff;
pub mod error;
pub mod head;
pub mod hpsearch;
pub mod model;
pub mod plm;
pub mod scalar;
pub mod tasks;
pub mod template;
pub mod training;
pub mod verbalizer;

pub use error::{Error, Result};
pub use model::{Classifier, Paradigm};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type MaskedLm32 = plm::MaskedLm<f32>;
pub type MaskedLm64 = plm::MaskedLm<f64>;
pub type Classifier32 = model::Classifier<f32>;
pub type Classifier64 = model::Classifier<f64>;
