//! Decentralized stochastic optimization laboratory.
//!
//! The crate implements DVR, a dual-free decentralized variance-reduced
//! method for regularized finite sums spread over a gossip network, its
//! Chebyshev- and Catalyst-accelerated variants, primal baselines (EXTRA,
//! Catalyst-EXTRA, GT-SAGA), and a dual verification engine that checks the
//! Bregman coordinate descent view of DVR on small instances.
//!
//! Module map:
//!
//! | module | role |
//! |--------|------|
//! | [`topology`] | graphs, Laplacian gossip matrices, Chebyshev operators |
//! | [`problem`] | GLM finite sums, libsvm/synthetic data, smoothness constants |
//! | [`dvr`] | DVR parameters, state, updates and runs |
//! | [`catalyst`] | accelerated DVR (outer proximal loop) |
//! | [`baselines`] | EXTRA, Catalyst-EXTRA, GT-SAGA |
//! | [`dual_oracle`] | explicit augmented dual, Bregman CD reference engine |
//! | [`harness`] | cost model, traces, reference solver, experiments |

pub mod baselines;
pub mod catalyst;
pub mod dual_oracle;
pub mod dvr;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod par;
pub mod problem;
pub mod topology;

pub use error::{Error, Result};
