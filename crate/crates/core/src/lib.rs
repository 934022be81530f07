//! Sparse random hierarchy model laboratory.
//!
//! * [`grammar`]: random hierarchical grammars, sparse sampling, the exact
//!   parsing oracle and the synonym / diffeomorphism operators.
//! * [`nn`]: locally connected, convolutional and fully connected ReLU
//!   networks with hand-written backpropagation.
//! * [`train`]: SGD with momentum on cross-entropy and test error.
//! * [`probes`]: synonym and diffeomorphism sensitivities, learning curves,
//!   sample-complexity extraction and scaling-law predictors.
//! * [`theory`]: the closed-form first gradient step, informative-pixel
//!   frequencies and the synonym grouping check.
//! * [`io`]: dataset export and network checkpoints.

pub mod grammar;
pub mod io;
pub mod nn;
pub mod probes;
pub mod rng;
pub mod theory;
pub mod train;

pub use rng::{CounterRng, StreamKey};
