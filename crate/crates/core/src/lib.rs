//! Domain-decomposition toolkit for model-parallel Fourier neural operators.
//!
//! The crate is organized bottom-up:
//!
//! - [`partition`]: pure partition algebra (worker grids, block decomposition,
//!   broadcast compatibility, repartition planning)
//! - [`runtime`]: deterministic in-process multi-worker execution with
//!   matched block exchange and fixed-order reduction
//! - [`tensor`]: distributed tensors over real64/complex128 scalars
//! - [`collective`]: broadcast and repartition as linear operators with
//!   explicit adjoints, plus an adjoint-test utility
//! - [`fft`]: local multidimensional FFTs (radix-2 plus Bluestein for
//!   arbitrary lengths), orthonormal scaling
//! - [`dfft`]: the distributed separable FFT as a chain of local FFTs and
//!   repartitions
//! - [`model`]: the distributed FNO with reverse-mode gradients and Adam,
//!   plus a single-worker reference implementation
//! - [`tensorfile`]: chunked n-dimensional tensor files with region reads
//! - [`heat`]: synthetic heat-equation dataset generation
//! - [`train`], [`bench`], [`selftest`]: command harnesses

pub mod bench;
pub mod collective;
pub mod dfft;
pub mod error;
pub mod fft;
pub mod heat;
pub mod model;
pub mod partition;
pub mod runtime;
pub mod selftest;
pub mod tensor;
pub mod tensorfile;
pub mod train;

pub use error::{Error, Result};
