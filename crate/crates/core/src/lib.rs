//! Functional embeddings of sparse MLPs and gradient search for compact
//! networks that fit a dataset.
//!
//! Numeric types are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual double-precision choice.

pub mod diffcore;
pub mod embsearch;
pub mod funcae;
pub mod genlab;
pub mod netrep;
pub mod persist;
pub mod scalar;

pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Mlp = netrep::MlpSpec<f64>;
pub type Dataset = genlab::FunctionalDataset<f64>;
pub type Params = funcae::AutoencoderParams<f64>;
pub type SearchResult = embsearch::SearchResult<f64>;
