use rand::RngCore;

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::world_model::Dynamics;

const EVALUATION_TOLERANCE: f64 = 1e-12;
const MAX_EVALUATION_SWEEPS: usize = 1_000_000;

/// A deterministic tabular MDP. Observations are one-hot state vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdpSpec {
    /// `next_state[s][a]`.
    pub next_state: Vec<Vec<usize>>,
    /// `reward[s][a]`, received on leaving `s` with action `a`.
    pub reward: Vec<Vec<f64>>,
    pub start: usize,
    pub terminal: Vec<bool>,
    pub max_steps: usize,
}

impl ChainMdpSpec {
    /// Left/right chain: action 0 moves left (staying put at state 0),
    /// action 1 moves right; stepping into the last state pays 1 and ends
    /// the episode.
    pub fn standard(states: usize) -> Self {
        assert!(states >= 2, "a chain needs at least two states");
        let goal = states - 1;
        let next_state = (0..states)
            .map(|s| {
                if s == goal {
                    vec![s, s]
                } else {
                    vec![s.saturating_sub(1), s + 1]
                }
            })
            .collect();
        let reward = (0..states)
            .map(|s| vec![0.0, if s + 1 == goal { 1.0 } else { 0.0 }])
            .collect();
        let mut terminal = vec![false; states];
        terminal[goal] = true;
        Self {
            next_state,
            reward,
            start: 0,
            terminal,
            max_steps: 4 * states,
        }
    }

    pub fn num_states(&self) -> usize {
        self.next_state.len()
    }

    pub fn num_actions(&self) -> usize {
        self.next_state.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states();
        let m = self.num_actions();
        if n == 0 || m == 0 {
            return Err(Error::Config("chain MDP needs states and actions".into()));
        }
        let total = self.next_state.iter().all(|row| row.len() == m && row.iter().all(|&s| s < n))
            && self.reward.len() == n
            && self.reward.iter().all(|row| row.len() == m)
            && self.terminal.len() == n;
        if !total || self.start >= n {
            return Err(Error::Config("chain MDP tables must be total over S x A".into()));
        }
        Ok(())
    }

    pub fn one_hot(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states()];
        v[state] = 1.0;
        v
    }

    /// Index of the largest entry of a latent vector.
    pub fn decode(&self, z: &[f64]) -> usize {
        z.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i)
    }
}

/// Exact `Q^π` by iterative policy evaluation. Transitions into a terminal
/// state do not bootstrap; rows for terminal states are zero.
pub fn chain_mdp_exact_q(spec: &ChainMdpSpec, policy: &[Vec<f64>], gamma: f64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let (n, m) = (spec.num_states(), spec.num_actions());
    if policy.len() != n || policy.iter().any(|row| row.len() != m) {
        return Err(Error::Precondition("policy table must be |S| x |A|".into()));
    }
    let mut q = vec![vec![0.0; m]; n];
    for _ in 0..MAX_EVALUATION_SWEEPS {
        let mut residual: f64 = 0.0;
        let mut next = vec![vec![0.0; m]; n];
        for s in (0..n).filter(|&s| !spec.terminal[s]) {
            for a in 0..m {
                let s2 = spec.next_state[s][a];
                let future = if spec.terminal[s2] {
                    0.0
                } else {
                    policy[s2].iter().zip(&q[s2]).map(|(p, v)| p * v).sum()
                };
                next[s][a] = spec.reward[s][a] + gamma * future;
                residual = residual.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        if residual < EVALUATION_TOLERANCE {
            return Ok(q);
        }
    }
    Err(Error::Numeric(format!(
        "policy evaluation did not converge in {MAX_EVALUATION_SWEEPS} sweeps"
    )))
}

#[derive(Debug, Clone)]
pub struct ChainEnv {
    spec: ChainMdpSpec,
    state: usize,
    steps: usize,
    done: bool,
}

impl ChainEnv {
    pub fn new(spec: ChainMdpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            state: spec.start,
            spec,
            steps: 0,
            done: false,
        })
    }

    pub fn spec(&self) -> &ChainMdpSpec {
        &self.spec
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for ChainEnv {
    fn observation_dim(&self) -> usize {
        self.spec.num_states()
    }

    fn num_actions(&self) -> usize {
        self.spec.num_actions()
    }

    fn max_episode_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = self.spec.start;
        self.steps = 0;
        self.done = false;
        self.spec.one_hot(self.state)
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Environment("step after terminal without reset".into()));
        }
        if action >= self.spec.num_actions() {
            return Err(Error::Environment(format!("chain action {action} out of range")));
        }
        let reward = self.spec.reward[self.state][action];
        self.state = self.spec.next_state[self.state][action];
        self.steps += 1;
        let reached = self.spec.terminal[self.state];
        let capped = self.steps >= self.spec.max_steps;
        self.done = reached || capped;
        Ok(StepOutcome {
            observation: self.spec.one_hot(self.state),
            reward,
            terminal: self.done,
            truncated: capped && !reached,
        })
    }
}

/// The chain's true dynamics exposed as a world model. Terminal states are
/// absorbing with zero reward.
#[derive(Debug, Clone)]
pub struct ChainOracle {
    spec: ChainMdpSpec,
}

impl ChainOracle {
    pub fn new(spec: ChainMdpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl Dynamics for ChainOracle {
    fn latent_dim(&self) -> usize {
        self.spec.num_states()
    }

    fn num_actions(&self) -> usize {
        self.spec.num_actions()
    }

    fn predict(&self, z: &[f64], action: usize) -> Result<(Vec<f64>, f64)> {
        if action >= self.spec.num_actions() {
            return Err(Error::Precondition(format!("action {action} out of range")));
        }
        let s = self.spec.decode(z);
        if self.spec.terminal[s] {
            return Ok((self.spec.one_hot(s), 0.0));
        }
        Ok((self.spec.one_hot(self.spec.next_state[s][action]), self.spec.reward[s][action]))
    }
}
