//! Matching nucleus point clouds across individuals of a stereotyped organism:
//! canonical alignment, Gaussian matching costs, pairwise graph matching,
//! cycle-consistent synchronization, atlas construction and self-supervised
//! parameter learning, plus a synthetic data generator for end-to-end runs.
//!
//! The numeric core is generic over the scalar type ([`scalar::Real`], i.e.
//! `f32` or `f64`); the aliases below fix the common `f64` instantiation.

pub mod error;
pub mod scalar;

pub mod linalg;

pub mod geometry;

pub mod costs;

pub mod assignment;

pub mod gm;

pub mod mgm;

pub mod atlas;

pub mod realign;

pub mod learn;

pub mod synth;

pub mod pipeline;

pub use error::{Error, Result};

pub type Nucleus = geometry::Nucleus<f64>;
pub type Worm = geometry::Worm<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type AffineTransform = geometry::AffineTransform<f64>;
pub type SharedCovariances = costs::SharedCovariances<f64>;
pub type CostWeights = costs::CostWeights<f64>;
pub type SparsityParams = costs::SparsityParams<f64>;
pub type GmInstance = costs::GmInstance<f64>;
pub type Matching = assignment::Matching;
pub type GmSolution = gm::GmSolution<f64>;
pub type Atlas = atlas::Atlas<f64>;
pub type AtlasEntry = atlas::AtlasEntry<f64>;
