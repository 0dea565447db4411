//! Horizontal diffusion maps for data organized as a fibre bundle: a set of
//! data objects (fibres), each with its own points, linked by pairwise
//! correspondences.
//!
//! The pipeline is
//!
//! 1. build a sample ([`sampling`]) or load a dataset ([`io`]),
//! 2. assemble the horizontal diffusion matrix `W` ([`kernels`]),
//! 3. normalize and form the graph horizontal Laplacians ([`laplacian`]),
//! 4. solve for a few eigenpairs and embed ([`spectral`]),
//! 5. cluster in the embedding ([`clustering`]).
//!
//! [`experiments`] reproduces the eigenvalue-multiplicity experiments on
//! the unit tangent bundle of S² (which is SO(3)).

pub mod clustering;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod knn;
pub mod laplacian;
pub mod localpca;
pub mod rng;
pub mod sampling;
pub mod selftest;
pub mod sparse;
pub mod spectral;

pub use error::{HdmError, Result};
