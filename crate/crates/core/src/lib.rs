//! Probabilistic multivariate time-series forecasting with a perceiver
//! encoder and an attentional copula decoder.
//!
//! A [`data::SeriesFrame`] holds observed and to-be-inferred points. The
//! [`model::Model`] embeds every point as a token, encodes tokens through a
//! latent bottleneck, and scores or samples the missing points with flow
//! marginals coupled by an attentional copula along an ordering built by
//! [`scheduler`].

pub mod config;
pub mod copula;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod guard;
pub mod memscale;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plot;
pub mod scheduler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
