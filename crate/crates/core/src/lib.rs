//! Symmetry-aware MCMC inference for small tanh-activated MLPs.
//!
//! The crate provides the pieces of a many-short-chains Bayesian workflow:
//!
//! - [`net`]: MLP architectures, the flat parameter layout, and forward
//!   evaluation.
//! - [`model`]: the Gaussian regression model (prior, likelihood, posterior,
//!   analytic gradients, MAP estimation, deep ensembles).
//! - [`sampler`]: a No-U-Turn sampler with warmup adaptation and a
//!   deterministic multi-chain runner for the one-sample-per-chain regime.
//! - [`symmetry`]: equioutput transformations (hidden-neuron permutations and
//!   tanh sign flips) and transformation-set cardinality bounds.
//! - [`chains`]: the generalized coupon-collector bound on the number of
//!   chains needed to visit all functionally diverse posterior modes.
//! - [`removal`]: post-hoc symmetry removal (max-margin sign canonicalization
//!   plus iterative greedy k-NN neuron relabeling).
//! - [`analysis`]: LPPD, posterior predictive grids, consecutive-KL tracking,
//!   and spectral clustering of canonicalized samples.
//! - [`data`]: synthetic dataset generators, standardization, and CSV I/O.

pub mod analysis;
pub mod chains;
pub mod data;
mod error;
pub mod matrix;
pub mod model;
pub mod net;
pub mod removal;
pub mod sampler;
pub mod symmetry;

pub use error::{Error, Result};
