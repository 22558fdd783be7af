//! Hierarchical CNN/LSTM/autoencoder decoding of imagined speech from
//! EEG channel covariance.
//!
//! Everything here is pure computation over `alloc`; file formats,
//! timing and the command-line driver live in the `ccvnet` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autoenc;
pub mod branches;
pub mod config;
pub mod covariance;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trial;

pub use autoenc::{Architecture, DaeSpec, HeadSpec, Pipeline, Prediction};
pub use branches::{BranchOutput, Classifier, CnnSpec, RnnOrder, RnnSpec, SeqAxis};
pub use config::TrainConfig;
pub use covariance::{ccv, standardize, CovMatrix, NormStats};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Adam, ParamStore};
pub use tensor::Tensor;
pub use train::{train_pipeline, Metrics, RunMeta, RunReport};
pub use trial::Trial;
