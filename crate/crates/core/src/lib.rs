//! Open-set active learning simulation.
//!
//! A (K+1)-way detector trained with a low-temperature cross-entropy scores
//! unlabeled examples by their maximum activation value; a two-component
//! Gaussian mixture per predicted class turns those values into
//! known-probabilities, and the top `b` are sent to a simulated annotator.
//! Random, uncertainty, certainty, coreset and BALD baselines run through
//! the same loop for comparison.

pub mod cli;
pub mod config;
pub mod datapool;
pub mod gmm;
pub mod harness;
pub mod nn;
pub mod report;
pub mod samplers;
pub mod seeds;
pub mod selftest;

pub use datapool::{Dataset, OpenSetSplit, OracleAnswer, PoolState};
pub use gmm::Gmm1d;
pub use harness::{Ablation, ExperimentConfig, ExperimentResult, RoundMetrics};
pub use nn::{NetParams, NetSpec, TrainConfig};
pub use samplers::{QueryBatch, Strategy};
