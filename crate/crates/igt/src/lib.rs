//! Value-function learning for finite-horizon deterministic optimal control,
//! and its extension to first-order mean field games via fictitious play.
//!
//! The crate is organized around a small set of numerical building blocks:
//!
//! - [`diffnum`]: flat parameter vectors, exact gradients of losses that may
//!   contain input gradients of networks, and the Adam optimizer.
//! - [`nets`]: the residual value network with exact terminal condition and
//!   the flow-generator network with exact initial condition.
//! - [`ode_ivp`]: adaptive Dormand-Prince 5(4) initial-value integration.
//! - [`tpbvp`]: Lobatto-IIIA collocation with damped Newton and residual-driven
//!   mesh refinement for the two-point boundary value problems of the
//!   maximum principle.
//! - [`problems`]: the benchmark catalog (linear-quadratic, quadcopter,
//!   obstacle avoidance, and their mean-field counterparts).
//! - [`igt`]: the initialize / generate / train rounds producing a value
//!   network from maximum-principle data.
//! - [`mfg`]: fictitious play with a neural flow generator and restart cycles.
//! - [`sinkhorn`]: debiased entropic optimal transport between particle clouds.
//! - [`cli`]: the experiment runner behind the `igt` binary.

pub mod cli;
pub mod diffnum;
pub mod igt;
pub mod linalg;
pub mod mfg;
pub mod nets;
pub mod ode_ivp;
pub mod problems;
pub mod sinkhorn;
pub mod tpbvp;
