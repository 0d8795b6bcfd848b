//! Desk-scale pose-conditioned style GAN workbench.
//!
//! The crate builds up from a minimal reverse-mode tensor tape to a full
//! adversarial training loop with Fréchet-distance evaluation, latent-space
//! probing (inversion / interpolation / layer-split mixing for garment
//! transfer), and a procedural sprite dataset whose measurement oracles make
//! the probes assertable.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod oracles;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Resample};
pub use tensor::{Dtype, Elem, Tensor};
