//! Domain adaptation of a black-box language model by interpolating its next-token
//! distribution with a k-nearest-neighbor retrieval distribution, where the
//! interpolation coefficients and retrieval temperatures are trained.
//!
//! The pipeline: a [`datastore::Datastore`] of (context embedding, next token) pairs is
//! queried for each prediction event of a [`trace`]; the neighbors give a retrieval
//! distribution ([`retrieval`]); the [`adapter`] mixes it with the LM distribution; the
//! [`trainer`] fits the adapter by SGD; [`evaluation`] reports perplexity, including under
//! top-q restricted access; [`analysis`] inspects the learned coefficients. [`toy`] builds
//! a fully synthetic world so all of it runs without an external model.

pub mod adapter;
pub mod analysis;
mod codec;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod retrieval;
pub mod toy;
pub mod trace;
pub mod trainer;
pub mod types;

pub use adapter::{
    effective_lambda, interpolate, interpolate_grad, AdapterParams, EmbeddingMatrix, InitConfig, InterpolationKind,
    InterpolationSpec, ParamGrad, TemperatureParams, Variant,
};
pub use datastore::{Datastore, Metric, Neighbor, NeighborSet};
pub use error::{Error, Result};
pub use retrieval::{knn_distribution, knn_distribution_grad, TemperatureKind, TemperatureSpec};
pub use types::{nll, renormalize, DenseDistribution, Embedding, SparseTopQ, TokenId, Vocabulary};
