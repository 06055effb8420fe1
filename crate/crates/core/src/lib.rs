//! Federated fine-tuning of frozen networks through stochastic binary masks.
//!
//! Clients learn per-weight keep probabilities over a frozen network, sample
//! binary masks from them, and send the server only the positions where
//! their mask differs from a mask both sides sample from the shared global
//! probabilities. Those positions travel as the fingerprint array of a
//! binary fuse filter, DEFLATE-compressed; the server recovers them with a
//! membership sweep and folds the reconstructed masks into per-weight Beta
//! posteriors.
//!
//! Modules, bottom-up:
//!
//! * [`filters`]: seeded hashing plus binary fuse / XOR filters.
//! * [`codec`]: masks, delta extraction, KL top-κ ranking, the update wire
//!   container and its PNG view.
//! * [`model`]: the toy frozen network, stochastic mask training and the
//!   linear probe.
//! * [`aggregation`]: Beta-posterior aggregation and the mean-estimation
//!   error check.
//! * [`sim`]: partitioning, scheduling and the round loop.

pub mod aggregation;
pub mod codec;
pub mod filters;
pub mod model;
pub mod sim;

pub use filters::{FilterConfig, FilterError, FilterLayout, FilterParams, FuseFilter, HashSeed};
