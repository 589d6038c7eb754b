//! Linearized 3-D electromagnetic contrast source inversion.
//!
//! The pipeline: an FDFD forward model on a Yee grid ([`grid`], [`pml`],
//! [`fdfd`]), a dense scattering matrix built from adjoint solves
//! ([`scattering`]), group-sparse estimation of the contrast sources with
//! cross-validation stopping ([`mmv`]), and conjugate-gradient recovery of
//! the contrast from the estimated sources ([`contrast`]). [`harness`] ties
//! these together into reproducible scenarios.

pub mod contrast;
pub mod error;
pub mod fdfd;
pub mod grid;
pub mod harness;
pub mod io;
pub mod krylov;
pub mod mmv;
pub mod pml;
pub mod scattering;
pub mod sparse;

pub use error::{CsiError, Result};
