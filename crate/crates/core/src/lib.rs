//! Deep splitting for semilinear partial integro-differential equations.
//!
//! The solution `u(t, x)` of `u_t + L u = f(t, x, u, D_x u, I[u])`,
//! `u(T, .) = g`, where `L` is the generator of a jump diffusion, is
//! approximated on a time grid by one network per step, fitted backward in
//! time against the frozen network of the next step.

pub mod deep_split;
pub mod error;
pub mod harness;
pub mod neural;
pub mod oracles;
pub mod par;
pub mod problem;
pub mod rng;
pub mod simulate;

pub use deep_split::{run_ds, run_ds_linear, DSSolution, TrainConfig};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, Preset, RunReport};
pub use neural::{Activation, Network};
pub use problem::{BasketParams, ProblemSpec, RegulatorParams, TimeGrid};
pub use rng::RngStream;
