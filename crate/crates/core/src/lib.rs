//! Manifold capacity and representation geometry for layered feature sets.
//!
//! The crate is organised by analysis stage:
//!
//! * [`dataset`] loads feature containers and assembles labelled [`ManifoldSet`]s.
//! * [`geometry`] computes centroids, center correlations, manifold subspaces and PCA.
//! * [`separability`] and [`sim`] measure capacity empirically with random dichotomies.
//! * [`qp`] and [`mft`] compute mean-field capacity, radius and dimension.
//! * [`svm`] and [`fields`] train one-vs-rest linear SVMs and collect signed fields.
//! * [`report`] and [`run`] turn per-layer results into normalised trajectories.

pub mod dataset;
pub mod error;
pub mod fields;
pub mod geometry;
mod linalg;
pub mod mft;
pub mod qp;
pub mod report;
pub mod rng;
pub mod run;
pub mod separability;
pub mod sim;
pub mod svm;

pub use dataset::{LayeredFeatureSet, Manifold, ManifoldSet, SamplingPolicy};
pub use error::{Error, Result};
pub use fields::FieldDistribution;
pub use mft::{MftConfig, MftReport};
pub use sim::{SimCapacityResult, SimConfig};

/// Version tag written into every JSON document produced by the crate.
pub const SCHEMA_VERSION: u32 = 1;
