//! Convolutional dictionary learning on d-dimensional signals.
//!
//! The sparse coding step runs as a grid of asynchronous workers, each
//! performing locally greedy coordinate descent on its own sub-domain and
//! arbitrating border updates with soft-locks. The dictionary step reduces
//! per-worker sufficient statistics and runs projected gradient descent.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: domains, arrays, convolutions, `.sig` I/O.
//! - [`csc`]: single-process coordinate descent (greedy, randomized,
//!   locally greedy).
//! - [`grid`]: worker partitioning, borders, routing and soft-lock
//!   arbitration.
//! - [`runtime`]: the distributed sparse coding executor.
//! - [`dict`]: sufficient statistics and projected gradient descent.
//! - [`cdl`]: the alternating learning driver.
//! - [`verify`]: brute-force oracles and Monte-Carlo checks.
//! - [`workbench`]: synthetic data and benchmark scenarios.

pub mod cdl;
pub mod csc;
pub mod dict;
pub mod error;
pub mod grid;
pub mod par;
pub mod runtime;
pub mod tensor;
pub mod verify;
pub mod workbench;

pub use error::{Error, Result};
