//! Laboratory for the supercritical random-cluster model on Z^d.

pub mod cli;
pub mod cluster_geometry;
pub mod estimator;
pub mod lattice;
pub mod polymer;
pub mod rc_measure;
pub mod sampler;
pub mod transfer_op;
pub mod union_find;
