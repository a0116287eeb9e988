//! Emulation of quantum neural ODEs: parametric Hamiltonians, adjoint
//! gradient circuits, their continuous-time variant, Schrödingerisation of
//! linear ODEs and a small training loop on top.

// NaN must fail range checks, which `!(x > 0.0)` does and `x <= 0.0` does not.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod adjoint;
pub mod block;
pub mod checks;
pub mod continuous;
pub mod error;
pub mod evolution;
pub mod hamiltonian;
pub mod linalg;
pub mod loss;
pub mod quantum;
pub mod sampling;
pub mod schrodinger;
pub mod stats;
pub mod train;

pub use error::{QnodeError, Result};
