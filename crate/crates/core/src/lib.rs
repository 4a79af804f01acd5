//! Community recovery on sparse stochastic block models.
//!
//! The library is organized around the pipeline used to study how much of a
//! planted community structure can be recovered from a sparse graph:
//!
//! * [`model`] — block-model parameters, the label transition matrix of the
//!   associated broadcast process, its spectrum, and regularity checks.
//! * [`tree`] — Poisson branching trees carrying broadcast labels, plus the
//!   level statistics used to validate them.
//! * [`estimators`] — root-label estimators on trees: eigenvector-weighted
//!   majority votes, their iterated form, and exact belief-propagation
//!   posteriors with and without noisy observations.
//! * [`graph`] — block-model graph sampling, neighborhood extraction, a
//!   spectral partitioner used as a pluggable black box, and the
//!   amplification loop that upgrades any such black box by running belief
//!   propagation on the boundary of each vertex's neighborhood.
//!
//! The crate is `no_std` (allocation required); everything that touches the
//! filesystem or a terminal lives in the companion CLI crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod estimators;
pub mod graph;
pub mod linalg;
pub mod math;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tree;

pub use estimators::{EstimatorOutcome, ErrorMatrix, MethodTag, PosteriorVector};
pub use graph::{
    align_partitions, ball, ball_as_broadcast_tree, black_box_partition, coupling_radius,
    estimate_noise_matrix, overlap_accuracy, reconstruct_algorithm1, reconstruct_algorithm1_with,
    sample_sbm, Algorithm1Config, Algorithm1Diagnostics, Algorithm1Output, Ball, GraphError,
    NoiseEstimate, NoiseEstimationCfg, Partition, PartitionSource, Partitioner, SbmInstance,
    SpectralPartitioner,
};
pub use model::{ConditionReport, ModelSpec, NoiseMatrix, Spectrum, TransitionSpec};
pub use tree::{BroadcastTree, TreeParams};
