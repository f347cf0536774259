//! Very deep face-recognition networks trained under joint
//! identification-verification supervision, plus the recognition back end
//! (region ensembles, PCA, Joint Bayesian) and LFW-style evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod net;
pub mod params;
pub mod pipeline;
pub mod recognition;
pub mod supervision;
pub mod tensor;
pub mod training;
pub mod weights;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use net::{Architecture, NetworkGraph, ScaleConfig};
pub use params::ParamStore;
pub use pipeline::run_pipeline;
pub use tensor::{Rng, Tensor};
