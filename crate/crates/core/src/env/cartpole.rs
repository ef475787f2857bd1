use rand::{Rng, RngCore};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
/// Half the pole length.
const POLE_HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * POLE_HALF_LENGTH;
const FORCE: f64 = 10.0;
const TAU: f64 = 0.02;

pub const X_LIMIT: f64 = 2.4;
/// 12 degrees.
pub const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const MAX_EPISODE_STEPS: usize = 200;

/// `(x, ẋ, θ, θ̇)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState(pub [f64; 4]);

impl CartPoleState {
    pub fn is_failure(&self) -> bool {
        let [x, _, theta, _] = self.0;
        x.abs() > X_LIMIT || theta.abs() > THETA_LIMIT
    }
}

/// One Euler step of the cart-pole dynamics. Returns the next state, the
/// reward (+1 every step) and whether the pole fell or the cart left the track.
pub fn cartpole_step(state: CartPoleState, action: usize) -> Result<(CartPoleState, f64, bool)> {
    let force = match action {
        0 => -FORCE,
        1 => FORCE,
        a => return Err(Error::Environment(format!("cart-pole action {a} not in {{0, 1}}"))),
    };
    let [x, x_dot, theta, theta_dot] = state.0;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    let next = CartPoleState([
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ]);
    Ok((next, 1.0, next.is_failure()))
}

#[derive(Debug, Clone)]
pub struct CartPole {
    state: CartPoleState,
    steps: usize,
    max_steps: usize,
    done: bool,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new(MAX_EPISODE_STEPS)
    }
}

impl CartPole {
    pub fn new(max_steps: usize) -> Self {
        Self {
            state: CartPoleState([0.0; 4]),
            steps: 0,
            max_steps,
            done: false,
        }
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: CartPoleState) -> Vec<f64> {
        self.state = state;
        self.steps = 0;
        self.done = false;
        state.0.to_vec()
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }
}

impl Environment for CartPole {
    fn observation_dim(&self) -> usize {
        4
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut s = [0.0; 4];
        for v in &mut s {
            *v = rng.gen_range(-0.05..0.05);
        }
        self.reset_to(CartPoleState(s))
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Environment("step after terminal without reset".into()));
        }
        let (next, reward, failed) = cartpole_step(self.state, action)?;
        self.state = next;
        self.steps += 1;
        let capped = self.steps >= self.max_steps;
        self.done = failed || capped;
        Ok(StepOutcome {
            observation: next.0.to_vec(),
            reward,
            terminal: self.done,
            truncated: capped && !failed,
        })
    }
}
