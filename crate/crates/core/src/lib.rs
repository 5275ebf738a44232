//! Monte Carlo laboratory for the 3D linear wave equation with two-temperature random
//! initial data.
//!
//! The crate samples spliced Gaussian (and odd-pushforward non-Gaussian) initial fields on a
//! periodic lattice, propagates them exactly in Fourier space, estimates correlations, currents
//! and characteristic functionals over ensembles, and compares them with the closed-form
//! equilibrium limits.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod io;
pub mod lattice;
pub mod limits;
pub mod oracle;
pub mod propagate;
pub mod quadrature;
pub mod runner;
pub mod stats;
pub mod testfn;

pub use error::{Error, Result};
pub use lattice::{Lattice, Transform};
