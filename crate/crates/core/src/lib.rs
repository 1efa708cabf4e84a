//! Hierarchical image-report contrastive pretraining on a synthetic corpus.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod hier_agg;
pub mod image;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod run;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
