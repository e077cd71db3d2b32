//! Spectral operators of matrices and their nonsmooth first-order calculus.
//!
//! A spectral operator applies a mixed-symmetric vector map to all
//! eigenvalues or singular values of a matrix and reassembles the result with
//! the matrix's own spectral factors. This crate provides:
//!
//! - ordered, deterministic decompositions and spectrum partitioning
//!   ([`linalg`]);
//! - pluggable mixed-symmetric maps with directional derivatives, Jacobians
//!   and symmetry checks ([`maps`]);
//! - operator evaluation, the smooth/nonsmooth split, divided-difference
//!   derivative tables, Frechet and directional derivatives ([`spectral`]);
//! - elements of the Bouligand/Clarke generalized Jacobian as applicable
//!   linear maps ([`jacobian`]);
//! - Steklov averaged maps and smoothing operators ([`smoothing`]);
//! - an empirical verification harness for Lipschitz moduli,
//!   B-differentiability and semismoothness orders ([`verify`]);
//! - a dual semismooth Newton solver for the nearest correlation matrix
//!   problem as an end-to-end consumer ([`ncm`]).

pub mod error;
pub mod linalg;
pub mod maps;
pub mod jacobian;
pub mod ncm;
pub mod sampling;
pub mod smoothing;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};

pub use nalgebra;
