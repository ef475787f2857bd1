//! Environments implemented natively: cart-pole balancing and a small
//! deterministic chain MDP with an exact policy-evaluation oracle.

mod cartpole;
mod chain;

pub use cartpole::{cartpole_step, CartPole, CartPoleState, MAX_EPISODE_STEPS, THETA_LIMIT, X_LIMIT};
pub use chain::{chain_mdp_exact_q, ChainEnv, ChainMdpSpec, ChainOracle};

use rand::RngCore;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over, for any reason.
    pub terminal: bool,
    /// The episode ended only because the step cap was reached.
    pub truncated: bool,
}

pub trait Environment {
    fn observation_dim(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn max_episode_steps(&self) -> usize;

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Errors when called after a terminal step without a reset, or with an
    /// out-of-range action.
    fn step(&mut self, action: usize) -> Result<StepOutcome>;
}
