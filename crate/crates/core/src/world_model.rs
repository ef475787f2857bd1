//! Learned transition and reward models, imagined rollouts and forward-looking
//! TD(λ) Q-value estimates.
//!
//! Actions are fed to both networks as a one-hot vector appended to the
//! latent state. Imagination never predicts termination: a rollout always
//! runs the full horizon and bootstraps from the value function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::estimator::EstimatorConfig;
use crate::nn::{mlp_layers, Activation, Network, Optimizer};
use crate::swor::{CategoricalDistribution, SworSample};

/// One real environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// The episode ended at this transition.
    pub terminal: bool,
    /// The episode ended only because of the step cap.
    pub truncated: bool,
}

/// Anything that can predict `(z', r)` from `(z, a)`.
pub trait Dynamics {
    fn latent_dim(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn predict(&self, z: &[f64], action: usize) -> Result<(Vec<f64>, f64)>;
}

/// A state-conditioned action distribution.
pub trait Policy {
    fn action_probabilities(&self, z: &[f64]) -> Result<Vec<f64>>;
}

impl Policy for Network {
    fn action_probabilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.predict(z)
    }
}

pub trait ValueFunction {
    fn value(&self, z: &[f64]) -> Result<f64>;
}

impl ValueFunction for Network {
    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.predict(z)?[0])
    }
}

impl<F: Fn(&[f64]) -> f64> ValueFunction for F {
    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub transition_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub activation: Activation,
    /// Predict `z' − z` instead of `z'`.
    pub residual: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            transition_hidden: vec![64],
            reward_hidden: vec![64],
            activation: Activation::Relu,
            residual: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    transition: Network,
    reward: Network,
    latent_dim: usize,
    num_actions: usize,
    residual: bool,
}

impl WorldModel {
    /// Both networks start with a zero output layer, so a fresh model predicts
    /// `z' = z` (residual) or `z' = 0`, and zero reward, for every action.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        num_actions: usize,
        config: &WorldModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input = latent_dim + num_actions;
        let mut transition = Network::new(
            mlp_layers(input, &config.transition_hidden, latent_dim, config.activation, Activation::Identity),
            rng,
        )?;
        let mut reward = Network::new(
            mlp_layers(input, &config.reward_hidden, 1, config.activation, Activation::Identity),
            rng,
        )?;
        transition.scale_output_layer(0.0);
        reward.scale_output_layer(0.0);
        Self::from_networks(transition, reward, num_actions, config.residual)
    }

    pub fn from_networks(transition: Network, reward: Network, num_actions: usize, residual: bool) -> Result<Self> {
        let latent_dim = transition.output_width();
        let input = latent_dim + num_actions;
        if transition.input_width() != input {
            return Err(Error::dimension("transition network input", input, transition.input_width()));
        }
        if reward.input_width() != input {
            return Err(Error::dimension("reward network input", input, reward.input_width()));
        }
        if reward.output_width() != 1 {
            return Err(Error::dimension("reward network output", 1, reward.output_width()));
        }
        Ok(Self {
            transition,
            reward,
            latent_dim,
            num_actions,
            residual,
        })
    }

    pub fn transition_network(&self) -> &Network {
        &self.transition
    }

    pub fn reward_network(&self) -> &Network {
        &self.reward
    }

    pub fn is_residual(&self) -> bool {
        self.residual
    }

    fn encode(&self, z: &[f64], action: usize) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::dimension("latent state", self.latent_dim, z.len()));
        }
        if action >= self.num_actions {
            return Err(Error::Precondition(format!(
                "action {action} outside {} actions",
                self.num_actions
            )));
        }
        let mut x = Vec::with_capacity(self.latent_dim + self.num_actions);
        x.extend_from_slice(z);
        x.extend((0..self.num_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
        Ok(x)
    }

    /// Mean absolute error of the transition network on `batch`.
    pub fn transition_loss(&self, batch: &[TransitionRecord]) -> Result<f64> {
        let mut total = 0.0;
        for record in batch {
            let (pred, _) = self.predict(&record.state, record.action)?;
            total += pred
                .iter()
                .zip(&record.next_state)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>();
        }
        Ok(total / (batch.len() * self.latent_dim) as f64)
    }

    /// One optimizer step on the mean absolute error between predicted and
    /// observed next states. Returns the loss before the step.
    pub fn train_transition(&mut self, batch: &[TransitionRecord], optimizer: &mut Optimizer) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty transition batch".into()));
        }
        let scale = 1.0 / (batch.len() * self.latent_dim) as f64;
        let mut grad = vec![0.0; self.transition.parameter_count()];
        let mut loss = 0.0;
        for record in batch {
            if record.next_state.len() != self.latent_dim {
                return Err(Error::dimension("next state", self.latent_dim, record.next_state.len()));
            }
            let trace = self.transition.trace(&self.encode(&record.state, record.action)?)?;
            let out = trace.output();
            let mut dout = vec![0.0; self.latent_dim];
            for d in 0..self.latent_dim {
                let pred = if self.residual { record.state[d] + out[d] } else { out[d] };
                let diff = pred - record.next_state[d];
                loss += diff.abs();
                dout[d] = sign(diff);
            }
            self.transition.accumulate_gradient(&trace, &dout, scale, &mut grad)?;
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("transition loss {loss}")));
        }
        optimizer.apply(&mut self.transition, &grad)?;
        Ok(loss)
    }

    pub fn reward_loss(&self, batch: &[TransitionRecord]) -> Result<f64> {
        let mut total = 0.0;
        for record in batch {
            let (_, r) = self.predict(&record.state, record.action)?;
            total += (r - record.reward).abs();
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step on the mean absolute reward error. Returns the loss
    /// before the step.
    pub fn train_reward(&mut self, batch: &[TransitionRecord], optimizer: &mut Optimizer) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty reward batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.reward.parameter_count()];
        let mut loss = 0.0;
        for record in batch {
            let trace = self.reward.trace(&self.encode(&record.state, record.action)?)?;
            let diff = trace.output()[0] - record.reward;
            loss += diff.abs();
            self.reward.accumulate_gradient(&trace, &[sign(diff)], scale, &mut grad)?;
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("reward loss {loss}")));
        }
        optimizer.apply(&mut self.reward, &grad)?;
        Ok(loss)
    }
}

/// Subgradient of `|x|` with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Dynamics for WorldModel {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn predict(&self, z: &[f64], action: usize) -> Result<(Vec<f64>, f64)> {
        let x = self.encode(z, action)?;
        let mut next = self.transition.predict(&x)?;
        if self.residual {
            next.iter_mut().zip(z).for_each(|(n, &v)| *n += v);
        }
        let reward = self.reward.predict(&x)?[0];
        Ok((next, reward))
    }
}

/// An `h`-step rollout in the model. `states` holds `z_0..=z_h`; `actions`
/// and `rewards` hold `a_0..a_{h-1}` and `r̂_0..r̂_{h-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Rolls the model forward `horizon` steps from `(z0, a0)`, sampling later
/// actions from `policy` at the imagined states.
pub fn imagine<R: Rng + ?Sized>(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    z0: &[f64],
    a0: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<ImaginedTrajectory> {
    if horizon == 0 {
        return Err(Error::Precondition("imagination horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    states.push(z0.to_vec());
    let mut action = a0;
    for t in 0..horizon {
        let (next, reward) = dynamics.predict(&states[t], action)?;
        ensure_finite(&next, "imagined latent state")?;
        if !reward.is_finite() {
            return Err(Error::Numeric(format!("imagined reward {reward} at step {t}")));
        }
        actions.push(action);
        rewards.push(reward);
        if t + 1 < horizon {
            let probs = policy.action_probabilities(&next)?;
            action = CategoricalDistribution::new(probs)?.sample(rng);
        }
        states.push(next);
    }
    Ok(ImaginedTrajectory {
        states,
        actions,
        rewards,
    })
}

/// `n`-step return `Σ_{t<n} γ^t r̂_t + γ^n V(z_n)`.
pub fn td_n(trajectory: &ImaginedTrajectory, n: usize, value: &dyn ValueFunction, gamma: f64) -> Result<f64> {
    if n == 0 || n > trajectory.horizon() {
        return Err(Error::Precondition(format!(
            "n = {n} outside [1, {}]",
            trajectory.horizon()
        )));
    }
    let mut discount = 1.0;
    let mut total = 0.0;
    for &r in &trajectory.rewards[..n] {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total + discount * value.value(&trajectory.states[n])?)
}

/// Mixture weights of `TD(1..=h)`: `(1−λ)λ^{n−1}` for `n < h` and `λ^{h−1}` for `n = h`.
pub fn td_lambda_weights(lambda: f64, horizon: usize) -> Vec<f64> {
    let mut weights = Vec::with_capacity(horizon);
    let mut power = 1.0;
    for _ in 1..horizon {
        weights.push((1.0 - lambda) * power);
        power *= lambda;
    }
    if horizon > 0 {
        weights.push(power);
    }
    weights
}

/// Every `TD(n)` for `n = 1..=horizon`.
pub fn td_returns(
    trajectory: &ImaginedTrajectory,
    horizon: usize,
    value: &dyn ValueFunction,
    gamma: f64,
) -> Result<Vec<f64>> {
    if horizon == 0 || horizon > trajectory.horizon() {
        return Err(Error::Precondition(format!(
            "h = {horizon} outside [1, {}]",
            trajectory.horizon()
        )));
    }
    let mut returns = Vec::with_capacity(horizon);
    let mut discount = 1.0;
    let mut rewards = 0.0;
    for n in 1..=horizon {
        rewards += discount * trajectory.rewards[n - 1];
        discount *= gamma;
        returns.push(rewards + discount * value.value(&trajectory.states[n])?);
    }
    Ok(returns)
}

/// Forward-looking TD(λ) over the first `horizon` steps of a trajectory.
pub fn td_lambda(
    trajectory: &ImaginedTrajectory,
    lambda: f64,
    horizon: usize,
    value: &dyn ValueFunction,
    gamma: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Precondition(format!("lambda {lambda} outside [0, 1]")));
    }
    let returns = td_returns(trajectory, horizon, value, gamma)?;
    Ok(td_lambda_weights(lambda, horizon)
        .iter()
        .zip(&returns)
        .map(|(w, r)| w * r)
        .sum())
}

/// Imagined TD(λ) Q-values for each root action of a without-replacement sample.
#[allow(clippy::too_many_arguments)]
pub fn q_values_for_sample<R: Rng + ?Sized>(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    value: &dyn ValueFunction,
    z: &[f64],
    sample: &SworSample,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let rollouts = config.trajectories_per_action.max(1);
    sample
        .actions
        .iter()
        .map(|&a| {
            let mut total = 0.0;
            for _ in 0..rollouts {
                let trajectory = imagine(dynamics, policy, z, a, config.horizon, rng)?;
                total += td_lambda(&trajectory, config.lambda, config.horizon, value, config.gamma)?;
            }
            Ok(total / rollouts as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trajectory(rewards: &[f64], values: &[f64]) -> (ImaginedTrajectory, impl Fn(&[f64]) -> f64) {
        // latent state is just the step index, the value lookup reads it back
        let states = (0..=rewards.len()).map(|t| vec![t as f64]).collect();
        let table = values.to_vec();
        let traj = ImaginedTrajectory {
            states,
            actions: vec![0; rewards.len()],
            rewards: rewards.to_vec(),
        };
        (traj, move |z: &[f64]| table[z[0] as usize])
    }

    #[test]
    fn td_one_step_hand_value() {
        let (traj, v) = trajectory(&[1.0], &[0.0, 10.0]);
        assert!((td_n(&traj, 1, &v, 0.99).unwrap() - 10.9).abs() < 1e-12);
    }

    #[test]
    fn td_zero_discount_is_first_reward() {
        let (traj, v) = trajectory(&[2.0, 3.0, 4.0], &[0.0, 5.0, 6.0, 7.0]);
        for n in 1..=3 {
            assert_eq!(td_n(&traj, n, &v, 0.0).unwrap(), 2.0);
        }
    }

    #[test]
    fn td_zero_rewards_is_discounted_bootstrap() {
        let (traj, v) = trajectory(&[0.0; 4], &[0.0, 3.0, 3.0, 3.0, 3.0]);
        for n in 1..=4 {
            assert!((td_n(&traj, n, &v, 0.9).unwrap() - 0.9f64.powi(n as i32) * 3.0).abs() < 1e-12);
        }
        assert!(td_n(&traj, 0, &v, 0.9).is_err());
        assert!(td_n(&traj, 5, &v, 0.9).is_err());
    }

    #[test]
    fn td_lambda_two_step_hand_value() {
        let (traj, v) = trajectory(&[1.0, 1.0], &[0.0, 10.0, 5.0]);
        let q = td_lambda(&traj, 0.5, 2, &v, 0.99).unwrap();
        assert!((q - 8.89525).abs() < 1e-12);
    }

    #[test]
    fn td_lambda_endpoints() {
        let (traj, v) = trajectory(&[0.3, -1.0, 2.0, 0.5], &[0.0, 1.0, -2.0, 4.0, 8.0]);
        assert_eq!(td_lambda(&traj, 0.0, 4, &v, 0.9).unwrap(), td_n(&traj, 1, &v, 0.9).unwrap());
        assert_eq!(td_lambda(&traj, 1.0, 4, &v, 0.9).unwrap(), td_n(&traj, 4, &v, 0.9).unwrap());
    }

    #[test]
    fn td_lambda_of_equal_returns_is_that_return() {
        // r = c(1−γ), V ≡ c makes every TD(n) equal to c
        let c = 3.0;
        let gamma = 0.8;
        let (traj, v) = trajectory(&[c * (1.0 - gamma); 6], &[c; 7]);
        for lambda in [0.0, 0.3, 0.75, 1.0] {
            assert!((td_lambda(&traj, lambda, 6, &v, gamma).unwrap() - c).abs() < 1e-12);
        }
    }

    fn identity_model(dim: usize, actions: usize) -> WorldModel {
        let input = dim + actions;
        let transition = Network::from_parameters(
            vec![LayerSpec::new(input, dim, Activation::Identity)],
            vec![0.0; (input + 1) * dim],
        )
        .unwrap();
        let reward = Network::from_parameters(
            vec![LayerSpec::new(input, 1, Activation::Identity)],
            vec![0.0; input + 1],
        )
        .unwrap();
        WorldModel::from_networks(transition, reward, actions, true).unwrap()
    }

    struct Uniform(usize);

    impl Policy for Uniform {
        fn action_probabilities(&self, _z: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0 / self.0 as f64; self.0])
        }
    }

    #[test]
    fn single_step_imagination_has_one_transition() {
        let wm = identity_model(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = imagine(&wm, &Uniform(2), &[1.0, 2.0, 3.0], 1, 1, &mut rng).unwrap();
        assert_eq!(t.states.len(), 2);
        assert_eq!(t.actions, vec![1]);
        assert_eq!(t.rewards.len(), 1);
        assert!(imagine(&wm, &Uniform(2), &[1.0, 2.0, 3.0], 1, 0, &mut rng).is_err());
    }

    #[test]
    fn identity_dynamics_hold_the_state_fixed() {
        let wm = identity_model(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = [0.5, -0.25, 2.0];
        let t = imagine(&wm, &Uniform(2), &z0, 0, 10, &mut rng).unwrap();
        assert!(t.states.iter().all(|z| z == &z0));
        assert!(t.rewards.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn imagination_is_deterministic_under_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wm = WorldModel::new(4, 2, &WorldModelConfig::default(), &mut rng).unwrap();
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            imagine(&wm, &Uniform(2), &[0.1, 0.0, -0.1, 0.2], 0, 15, &mut r).unwrap()
        };
        assert_eq!(run(7), run(7));
    }

    struct Exploding;

    impl Dynamics for Exploding {
        fn latent_dim(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            1
        }
        fn predict(&self, z: &[f64], _a: usize) -> Result<(Vec<f64>, f64)> {
            Ok((vec![z[0] * 1e300], 0.0))
        }
    }

    #[test]
    fn non_finite_imagination_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = imagine(&Exploding, &Uniform(1), &[1e10], 0, 5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn identity_dynamics_give_equal_q_values() {
        let wm = identity_model(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let value = |_: &[f64]| 4.0;
        let config = EstimatorConfig {
            horizon: 5,
            lambda: 0.5,
            gamma: 0.9,
            ..EstimatorConfig::default()
        };
        let sample = SworSample {
            actions: vec![2, 0],
            inclusion_probabilities: vec![0.5, 0.5],
        };
        let q = q_values_for_sample(&wm, &Uniform(3), &value, &[0.3, 0.1], &sample, &config, &mut rng).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[0], q[1]);
        let weights = td_lambda_weights(0.5, 5);
        let expected: f64 = weights.iter().enumerate().map(|(i, w)| w * 0.9f64.powi(i as i32 + 1) * 4.0).sum();
        assert!((q[0] - expected).abs() < 1e-12);
    }

    fn record(state: Vec<f64>, action: usize, reward: f64, next_state: Vec<f64>) -> TransitionRecord {
        TransitionRecord {
            state,
            action,
            reward,
            next_state,
            terminal: false,
            truncated: false,
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_no_update() {
        let mut wm = identity_model(2, 2);
        let mut opt = crate::nn::OptimizerConfig::adam(0.01)
            .build(wm.transition_network().parameter_count())
            .unwrap();
        let before = wm.transition_network().parameters().to_vec();
        let batch = vec![record(vec![1.0, 2.0], 0, 0.0, vec![1.0, 2.0])];
        assert_eq!(wm.train_transition(&batch, &mut opt).unwrap(), 0.0);
        assert_eq!(wm.transition_network().parameters(), before.as_slice());
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut wm = identity_model(2, 2);
        let mut opt = crate::nn::OptimizerConfig::adam(0.01).build(wm.transition_network().parameter_count()).unwrap();
        assert!(wm.train_transition(&[], &mut opt).is_err());
    }
}
