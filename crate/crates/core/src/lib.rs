//! Neighborhood-augmented rhetorical role labeling.
//!
//! A hierarchical sentence tagger (hashed token embeddings, token BiLSTM,
//! attention pooling, sentence BiLSTM, linear-chain CRF) together with the
//! neighborhood machinery built around its contextualized sentence
//! representations: kNN and prototype datastores interpolated at inference
//! time, and contrastive, discourse-aware contrastive and prototypical
//! auxiliary losses at training time.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`crf`], [`contrastive`],
//! [`prototypical`], [`datastore`]) is generic over [`Scalar`]; the model
//! pipeline runs at `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod crf;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod featurizer;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod prototypical;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Datastore64 = datastore::Datastore<f64>;
pub type Datastore32 = datastore::Datastore<f32>;
