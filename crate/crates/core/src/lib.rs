//! Graph-based sequential recommendation.
//!
//! A behavior sequence becomes an interest graph (learned weighted cosine
//! similarity, sparsified by a global rank threshold); attentive graph
//! convolution fuses related items; a soft assignment pools the graph into
//! `m` interest clusters; an attention-gated GRU runs over the clusters and a
//! small MLP scores the target item.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod autograd;
pub mod data;
pub mod error;
pub mod evolution;
pub mod extraction;
pub mod fusion;
pub mod gradcheck;
pub mod graph_builder;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = model::SurgeModel<f64>;
pub type Model32 = model::SurgeModel<f32>;
pub type Graph64<'a> = autograd::Graph<'a, f64>;
pub type Graph32<'a> = autograd::Graph<'a, f32>;
pub type Params64 = params::ParamStore<f64>;
pub type Params32 = params::ParamStore<f32>;
pub type InterestGraph64 = graph_builder::InterestGraph<f64>;
pub type InterestGraph32 = graph_builder::InterestGraph<f32>;
pub type PooledGraph64 = extraction::PooledGraph<f64>;
pub type PooledGraph32 = extraction::PooledGraph<f32>;
