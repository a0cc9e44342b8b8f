//! Physics-informed reconstruction of the acoustic field in a lossy 1D tube
//! and estimation of its radiation coefficients.
//!
//! The guide in `book/` walks through the model and the pipeline; its code
//! listings run as doc-tests of this crate.

pub mod cli;
pub mod diffnet;
pub mod error;
pub mod fdm;
pub mod harness;
pub mod inverse;
pub mod physics;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/physics.md")]
    mod physics {}
    #[doc = include_str!("../../../book/src/reference-solver.md")]
    mod reference_solver {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inverse.md")]
    mod inverse {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
