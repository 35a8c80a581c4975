//! Training polynomial neural ODEs on stiff systems.
//!
//! The crate is layered bottom-up: dense linear algebra ([`densela`]),
//! reverse-mode differentiation ([`autodiff`]), the matrix exponential and
//! its derivative ([`matexp`]), the polynomial network ([`pinet`]), one-step
//! integrators with gradient support ([`odeint`]), the training loop
//! ([`train`]) and the benchmark problems ([`bench`]).

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod densela;
pub mod error;
pub mod matexp;
pub mod odeint;
pub mod pinet;
pub mod train;

pub use error::{Error, Result};
