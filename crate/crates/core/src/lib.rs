//! Desk-scale laboratory for flow-matching generative models trained with
//! online group-relative policy optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffnet`]: a small velocity network `v(x, t, c)` with exact
//!   reverse-mode gradients and an Adam optimizer.
//! - [`tasks`]: synthetic conditional distributions. The Gaussian family
//!   carries closed-form marginals and optimal velocity fields.
//! - [`cfm`]: conditional flow-matching pretraining of the reference policy.
//! - [`samplers`]: the deterministic Euler ODE sampler and the
//!   marginal-preserving SDE sampler with Gaussian transition likelihoods.
//! - [`rewards`]: binary-question softmax rewards, a cosine-similarity
//!   reward, and correlation metrics for reward calibration.
//! - [`grpo`]: group rollouts, advantage normalization, the clipped
//!   per-step surrogate with a KL anchor, and the training loop.
//! - [`offline`]: supervised fine-tuning and flow-adapted DPO baselines.
//! - [`harness`]: configuration, checkpoints, evaluation, sweeps, and the CLI.
//!
//! The `book/` directory at the repository root walks through the math with
//! runnable snippets; those snippets are compiled as doc-tests of this crate.

pub mod cfm;
pub mod diffnet;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod offline;
pub mod rewards;
pub mod samplers;
pub mod tasks;
mod util;

pub use error::{Error, Result};

/// A point in sample space.
pub type Point = Vec<f64>;

/// Anything that can produce a velocity for a state `(x, t, c)`.
///
/// Implemented by trained networks ([`diffnet::ParamVector`]), by the analytic
/// Gaussian oracle ([`tasks::OracleField`]), and by test stubs.
pub trait VelocityField: Sync {
    /// Dimension of the sample space.
    fn dim(&self) -> usize;

    /// Number of distinct condition ids accepted.
    fn num_conditions(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64, c: usize) -> Result<Point>;
}

// Chapters of the guide are compiled as doc-tests so the snippets stay in
// sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/velocity-network.md")]
    mod velocity_network {}
    #[doc = include_str!("../../../book/src/flow-matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/samplers.md")]
    mod samplers {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/grpo.md")]
    mod grpo {}
    #[doc = include_str!("../../../book/src/offline.md")]
    mod offline {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
