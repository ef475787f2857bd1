//! The training loop: act on-policy, and whenever the on-policy memory
//! overflows its batch size run a learning phase of world-model, value and
//! policy updates. AC and MAC share the loop and differ only in where the
//! action values come from.

mod config;
mod memory;

pub use config::{AgentConfig, AgentKind, NetworkConfig};
pub use memory::{OnPolicyMemory, WorldModelMemory};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::estimator::{batch_gradient, choose_k, coefficients, EstimatorVariant, StateGradientInput};
use crate::nn::{mlp_layers, Activation, Network, Optimizer};
use crate::swor::{sample_without_replacement, CategoricalDistribution, SworSample};
use crate::world_model::{q_values_for_sample, Dynamics, TransitionRecord, ValueFunction, WorldModel, WorldModelConfig};

const POLICY_OUTPUT_INIT_SCALE: f64 = 0.01;

/// Losses and diagnostics from one learning phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMetrics {
    /// Negated surrogate objective of the last policy iteration.
    pub policy_loss: f64,
    pub value_loss: f64,
    /// NaN when the agent has no world model or `I_WM = 0`.
    pub transition_loss: f64,
    pub reward_loss: f64,
    pub mean_k: f64,
    /// Mean policy entropy over the batch states.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub episode: usize,
    /// Undiscounted.
    pub episode_return: f64,
    pub steps: usize,
    pub phases: Vec<PhaseMetrics>,
}

impl EpisodeReport {
    /// Mean of one metric over this episode's learning phases, NaN if none ran.
    pub fn mean_metric(&self, f: impl Fn(&PhaseMetrics) -> f64) -> f64 {
        if self.phases.is_empty() {
            return f64::NAN;
        }
        self.phases.iter().map(f).sum::<f64>() / self.phases.len() as f64
    }
}

/// Discounted returns for each record of an on-policy batch, in order.
/// Returns stop at true terminals and bootstrap from `value` at step-cap
/// truncations and at the end of the batch if its last episode is unfinished.
pub fn monte_carlo_targets(records: &[TransitionRecord], gamma: f64, value: &dyn ValueFunction) -> Result<Vec<f64>> {
    let mut targets = vec![0.0; records.len()];
    let mut next_return = 0.0;
    for (i, r) in records.iter().enumerate().rev() {
        let last = i + 1 == records.len();
        let future = if r.terminal && !r.truncated {
            0.0
        } else if r.truncated || last {
            value.value(&r.next_state)?
        } else {
            next_return
        };
        targets[i] = r.reward + gamma * future;
        next_return = targets[i];
    }
    Ok(targets)
}

/// Where the policy gradient takes its action values from.
enum ActionValues<'a> {
    /// Imagined TD(λ) rollouts through a model.
    Imagined(&'a dyn Dynamics),
    /// Observed returns of the taken actions, one per batch state.
    Returns(&'a [f64]),
    /// Values of every action, one row per batch state.
    Table(&'a [Vec<f64>]),
}

/// The value network read through the configured output scale.
struct ScaledValue<'a> {
    network: &'a Network,
    scale: f64,
}

impl ValueFunction for ScaledValue<'_> {
    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.network.predict(z)?[0] * self.scale)
    }
}

pub struct Agent {
    config: AgentConfig,
    num_actions: usize,
    policy: Network,
    policy_optimizer: Optimizer,
    /// `V_φ`, or the Q-network for MAC.
    value: Network,
    value_optimizer: Optimizer,
    world_model: Option<WorldModel>,
    transition_optimizer: Option<Optimizer>,
    reward_optimizer: Option<Optimizer>,
    oracle: Option<Box<dyn Dynamics + Send>>,
    on_policy: OnPolicyMemory,
    world_model_memory: WorldModelMemory,
    rng: ChaCha8Rng,
    episodes: usize,
    policy_steps: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, observation_dim: usize, num_actions: usize) -> Result<Self> {
        config.validate(num_actions)?;
        if observation_dim == 0 || num_actions == 0 {
            return Err(Error::Config("observation and action spaces must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut policy = Network::new(
            mlp_layers(
                observation_dim,
                &config.policy.hidden,
                num_actions,
                config.policy.activation,
                Activation::Softmax,
            ),
            &mut rng,
        )?;
        // a near-uniform starting policy
        policy.scale_output_layer(POLICY_OUTPUT_INIT_SCALE);
        let value_outputs = if config.kind == AgentKind::Mac { num_actions } else { 1 };
        let mut value = Network::new(
            mlp_layers(
                observation_dim,
                &config.value.hidden,
                value_outputs,
                config.value.activation,
                Activation::Identity,
            ),
            &mut rng,
        )?;
        // value estimates start at zero everywhere
        value.scale_output_layer(0.0);
        let (world_model, transition_optimizer, reward_optimizer) = if config.kind == AgentKind::Wmpg {
            let wm_config = WorldModelConfig {
                transition_hidden: config.transition.hidden.clone(),
                reward_hidden: config.reward.hidden.clone(),
                activation: config.transition.activation,
                residual: config.residual_transition,
            };
            let wm = WorldModel::new(observation_dim, num_actions, &wm_config, &mut rng)?;
            let t = config.transition.optimizer.build(wm.transition_network().parameter_count())?;
            let r = config.reward.optimizer.build(wm.reward_network().parameter_count())?;
            (Some(wm), Some(t), Some(r))
        } else {
            (None, None, None)
        };
        Ok(Self {
            policy_optimizer: config.policy.optimizer.build(policy.parameter_count())?,
            value_optimizer: config.value.optimizer.build(value.parameter_count())?,
            on_policy: OnPolicyMemory::default(),
            world_model_memory: WorldModelMemory::new(config.world_model_capacity),
            config,
            num_actions,
            policy,
            value,
            world_model,
            transition_optimizer,
            reward_optimizer,
            oracle: None,
            rng,
            episodes: 0,
            policy_steps: 0,
        })
    }

    /// A WMPG agent that imagines with `dynamics` instead of its learned model.
    /// The learned model is still trained when `I_WM > 0`.
    pub fn with_oracle(
        config: AgentConfig,
        observation_dim: usize,
        num_actions: usize,
        dynamics: Box<dyn Dynamics + Send>,
    ) -> Result<Self> {
        if config.kind != AgentKind::Wmpg {
            return Err(Error::Config("only WMPG agents imagine with a model".into()));
        }
        if dynamics.latent_dim() != observation_dim || dynamics.num_actions() != num_actions {
            return Err(Error::Config("oracle dynamics do not match the environment".into()));
        }
        let mut agent = Self::new(config, observation_dim, num_actions)?;
        agent.oracle = Some(dynamics);
        Ok(agent)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn policy(&self) -> &Network {
        &self.policy
    }

    /// The value network, or the Q-network for MAC.
    pub fn value_network(&self) -> &Network {
        &self.value
    }

    pub fn world_model(&self) -> Option<&WorldModel> {
        self.world_model.as_ref()
    }

    pub fn on_policy_memory(&self) -> &OnPolicyMemory {
        &self.on_policy
    }

    pub fn world_model_memory(&self) -> &WorldModelMemory {
        &self.world_model_memory
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn action_probabilities(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.policy.predict(observation)
    }

    /// Runs one episode, triggering a learning phase whenever the on-policy
    /// memory holds more than `batch_size` transitions (possibly mid-episode).
    pub fn run_episode(&mut self, env: &mut dyn Environment, env_rng: &mut dyn RngCore) -> Result<EpisodeReport> {
        if env.num_actions() != self.num_actions || env.observation_dim() != self.policy.input_width() {
            return Err(Error::Config("environment does not match the agent".into()));
        }
        let mut observation = env.reset(env_rng);
        let mut episode_return = 0.0;
        let mut steps = 0;
        let mut phases = Vec::new();
        loop {
            let probs = self.policy.predict(&observation)?;
            let action = CategoricalDistribution::new(probs)?.sample(&mut self.rng);
            let outcome = env.step(action)?;
            episode_return += outcome.reward;
            steps += 1;
            self.on_policy.push(TransitionRecord {
                state: observation,
                action,
                reward: outcome.reward,
                next_state: outcome.observation.clone(),
                terminal: outcome.terminal,
                truncated: outcome.truncated,
            });
            if self.on_policy.len() > self.config.batch_size {
                phases.push(self.learning_phase()?);
            }
            if outcome.terminal {
                break;
            }
            observation = outcome.observation;
        }
        self.episodes += 1;
        Ok(EpisodeReport {
            episode: self.episodes,
            episode_return,
            steps,
            phases,
        })
    }

    /// Flushes the on-policy memory into the world-model memory, trains the
    /// world model, the value (or Q) network and the policy, then wipes the
    /// on-policy memory.
    pub fn learning_phase(&mut self) -> Result<PhaseMetrics> {
        if self.on_policy.is_empty() {
            return Err(Error::Usage("learning phase with an empty on-policy memory".into()));
        }
        let batch = self.on_policy.wipe();
        self.world_model_memory.extend(batch.iter().cloned());

        let (transition_loss, reward_loss) = self.train_world_model().map_err(|e| e.in_phase("world-model"))?;
        let (targets, value_loss) = self.train_value(&batch).map_err(|e| e.in_phase("value"))?;

        let mut policy_loss = f64::NAN;
        let mut mean_k = f64::NAN;
        let mut entropy = f64::NAN;
        for _ in 0..self.config.general_iterations {
            let step = self.policy_step(&batch, &targets).map_err(|e| e.in_phase("policy"))?;
            policy_loss = step.loss;
            mean_k = step.mean_k;
            entropy = step.entropy;
        }
        Ok(PhaseMetrics {
            policy_loss,
            value_loss,
            transition_loss,
            reward_loss,
            mean_k,
            entropy,
        })
    }

    fn train_world_model(&mut self) -> Result<(f64, f64)> {
        let (Some(wm), Some(t_opt), Some(r_opt)) = (
            self.world_model.as_mut(),
            self.transition_optimizer.as_mut(),
            self.reward_optimizer.as_mut(),
        ) else {
            return Ok((f64::NAN, f64::NAN));
        };
        let mut losses = (f64::NAN, f64::NAN);
        for _ in 0..self.config.world_model_iterations {
            let sample = self.world_model_memory.sample(self.config.batch_size, &mut self.rng);
            losses = (wm.train_transition(&sample, t_opt)?, wm.train_reward(&sample, r_opt)?);
        }
        Ok(losses)
    }

    /// Computes Monte Carlo targets once, then takes `I_V` mean-absolute-error
    /// steps. Returns the targets and the loss before the last step.
    fn train_value(&mut self, batch: &[TransitionRecord]) -> Result<(Vec<f64>, f64)> {
        let gamma = self.config.estimator.gamma;
        let scale = self.config.value_scale;
        let targets = if self.config.kind == AgentKind::Mac {
            // bootstrap with the policy-weighted Q at cut-off points
            let q = &self.value;
            let policy = &self.policy;
            let v = |z: &[f64]| -> f64 {
                match (q.predict(z), policy.predict(z)) {
                    (Ok(qs), Ok(ps)) => qs.iter().zip(&ps).map(|(a, b)| scale * a * b).sum(),
                    _ => f64::NAN,
                }
            };
            monte_carlo_targets(batch, gamma, &v)?
        } else {
            monte_carlo_targets(batch, gamma, &self.scaled_value())?
        };
        crate::error::ensure_finite(&targets, "value targets")?;
        let examples = self.value_examples(batch, &targets);
        let mut loss = f64::NAN;
        for _ in 0..self.config.value_iterations {
            loss = self.value_step(&examples)?;
        }
        if self.config.value_iterations == 0 {
            loss = self.value_loss(&examples)?;
        }
        Ok((targets, loss))
    }

    fn scaled_value(&self) -> ScaledValue<'_> {
        ScaledValue {
            network: &self.value,
            scale: self.config.value_scale,
        }
    }

    /// `(input, output index, target)` triples for the value regression: each
    /// batch state with its return and, for state-value agents, each state the
    /// environment terminated in with target zero.
    fn value_examples<'b>(&self, batch: &'b [TransitionRecord], targets: &[f64]) -> Vec<(&'b [f64], usize, f64)> {
        let mac = self.config.kind == AgentKind::Mac;
        let mut examples: Vec<(&[f64], usize, f64)> = batch
            .iter()
            .zip(targets)
            .map(|(r, &t)| (r.state.as_slice(), if mac { r.action } else { 0 }, t))
            .collect();
        if !mac && self.config.anchor_terminal_values {
            examples.extend(
                batch
                    .iter()
                    .filter(|r| r.terminal && !r.truncated)
                    .map(|r| (r.next_state.as_slice(), 0, 0.0)),
            );
        }
        examples
    }

    fn value_loss(&self, examples: &[(&[f64], usize, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for &(z, j, target) in examples {
            total += (self.config.value_scale * self.value.predict(z)?[j] - target).abs();
        }
        Ok(total / examples.len() as f64)
    }

    fn value_step(&mut self, examples: &[(&[f64], usize, f64)]) -> Result<f64> {
        let scale = 1.0 / examples.len() as f64;
        let mut grad = vec![0.0; self.value.parameter_count()];
        let mut out_grad = vec![0.0; self.value.output_width()];
        let mut loss = 0.0;
        for &(z, j, target) in examples {
            let trace = self.value.trace(z)?;
            let diff = self.config.value_scale * trace.output()[j] - target;
            loss += diff.abs();
            out_grad.iter_mut().for_each(|g| *g = 0.0);
            out_grad[j] = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            self.value.accumulate_gradient(&trace, &out_grad, scale, &mut grad)?;
        }
        self.value_optimizer.apply(&mut self.value, &grad)?;
        Ok(loss * scale)
    }

    /// Per-state coefficients `c_a` of the policy gradient at `state`.
    fn state_coefficients(
        &mut self,
        index: usize,
        state: &[f64],
        probabilities: &[f64],
        taken: usize,
        values: &ActionValues,
    ) -> Result<(Vec<f64>, usize)> {
        let estimator = &self.config.estimator;
        let value = ScaledValue {
            network: &self.value,
            scale: self.config.value_scale,
        };
        match values {
            ActionValues::Returns(returns) => {
                let sample = SworSample::single(taken, probabilities[taken]);
                let baseline = value.value(state)?;
                let q = [returns[index]];
                let input = StateGradientInput::new(probabilities, &sample, &q);
                Ok((coefficients(EstimatorVariant::SingleSampleMc, &input, Some(baseline))?, 1))
            }
            ActionValues::Table(table) => {
                let sample = SworSample::exhaustive(probabilities.len());
                let input = StateGradientInput::new(probabilities, &sample, &table[index]);
                Ok((coefficients(EstimatorVariant::ExactExpectation, &input, None)?, sample.k()))
            }
            ActionValues::Imagined(dynamics) => {
                let dist = CategoricalDistribution::new(probabilities.to_vec())?;
                let k = choose_k(&estimator.k, dist.entropy(), self.num_actions, self.policy_steps)
                    .min(dist.support_size());
                let sample = match estimator.variant {
                    EstimatorVariant::ExactExpectation => SworSample::exhaustive(self.num_actions),
                    EstimatorVariant::SingleSampleMc => {
                        let a = dist.sample(&mut self.rng);
                        SworSample::single(a, probabilities[a])
                    }
                    _ => sample_without_replacement(&dist, k, &mut self.rng)?,
                };
                let q = q_values_for_sample(
                    *dynamics,
                    &self.policy,
                    &value,
                    state,
                    &sample,
                    estimator,
                    &mut self.rng,
                )?;
                let baseline = value.value(state)?;
                let input = StateGradientInput::new(probabilities, &sample, &q);
                Ok((coefficients(estimator.variant, &input, Some(baseline))?, sample.k()))
            }
        }
    }

    /// The batch policy gradient of the current objective (ascent direction)
    /// over the states of `batch`. `targets` are the batch's Monte Carlo
    /// returns, used by AC.
    pub fn policy_gradient(&mut self, batch: &[TransitionRecord], targets: &[f64]) -> Result<PolicyGradient> {
        if targets.len() != batch.len() {
            return Err(Error::dimension("policy targets", batch.len(), targets.len()));
        }
        match self.config.kind {
            AgentKind::Ac => self.gradient_with(batch, &ActionValues::Returns(targets)),
            AgentKind::Mac => {
                let scale = self.config.value_scale;
                let table = batch
                    .iter()
                    .map(|r| Ok(self.value.predict(&r.state)?.iter().map(|q| q * scale).collect()))
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                self.gradient_with(batch, &ActionValues::Table(&table))
            }
            AgentKind::Wmpg => {
                let oracle = self.oracle.take();
                let world_model = self.world_model.take();
                let result = match (&oracle, &world_model) {
                    (Some(o), _) => self.gradient_with(batch, &ActionValues::Imagined(o.as_ref())),
                    (None, Some(wm)) => self.gradient_with(batch, &ActionValues::Imagined(wm)),
                    (None, None) => Err(Error::Usage("WMPG agent without a model".into())),
                };
                self.oracle = oracle;
                self.world_model = world_model;
                result
            }
        }
    }

    /// The exact-expectation batch gradient with the action values supplied
    /// directly, one row of `|A|` values per batch state. MAC uses this with
    /// its Q-network's outputs.
    pub fn policy_gradient_from_q_table(
        &mut self,
        batch: &[TransitionRecord],
        q_table: &[Vec<f64>],
    ) -> Result<PolicyGradient> {
        if q_table.len() != batch.len() {
            return Err(Error::dimension("Q table rows", batch.len(), q_table.len()));
        }
        self.gradient_with(batch, &ActionValues::Table(q_table))
    }

    fn gradient_with(&mut self, batch: &[TransitionRecord], values: &ActionValues) -> Result<PolicyGradient> {
        if batch.is_empty() {
            return Err(Error::Usage("policy gradient of an empty batch".into()));
        }
        let beta = self.config.entropy_coefficient;
        let mut per_state = Vec::with_capacity(batch.len());
        let mut objective = 0.0;
        let mut total_k = 0usize;
        let mut total_entropy = 0.0;
        for (i, record) in batch.iter().enumerate() {
            let trace = self.policy.trace(&record.state)?;
            let probs = trace.output().to_vec();
            let (coefs, k) = self.state_coefficients(i, &record.state, &probs, record.action, values)?;
            total_k += k;
            let entropy: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            total_entropy += entropy;
            objective += crate::estimator::surrogate_objective(&coefs, &probs) + beta * entropy;
            // probability-space gradient of Σ c ln π + β H
            let out_grad: Vec<f64> = coefs
                .iter()
                .zip(&probs)
                .map(|(&c, &p)| {
                    let score = if c == 0.0 { 0.0 } else { c / p };
                    let bonus = if beta == 0.0 {
                        0.0
                    } else {
                        -beta * (p.max(f64::MIN_POSITIVE).ln() + 1.0)
                    };
                    score + bonus
                })
                .collect();
            let mut grad = vec![0.0; self.policy.parameter_count()];
            self.policy.accumulate_gradient(&trace, &out_grad, 1.0, &mut grad)?;
            per_state.push(grad);
        }
        let n = batch.len() as f64;
        Ok(PolicyGradient {
            gradient: batch_gradient(&per_state)?,
            objective: objective / n,
            mean_k: total_k as f64 / n,
            entropy: total_entropy / n,
        })
    }

    fn policy_step(&mut self, batch: &[TransitionRecord], targets: &[f64]) -> Result<PolicyStep> {
        let g = self.policy_gradient(batch, targets)?;
        let descent: Vec<f64> = g.gradient.iter().map(|v| -v).collect();
        self.policy_optimizer.apply(&mut self.policy, &descent)?;
        self.policy_steps += 1;
        Ok(PolicyStep {
            loss: -g.objective,
            mean_k: g.mean_k,
            entropy: g.entropy,
        })
    }
}

/// Output of [`Agent::policy_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    /// Mean over states of `Σ_a c_a ∇θ log π(a|s)` plus the entropy bonus.
    pub gradient: Vec<f64>,
    /// Mean surrogate objective whose gradient is `gradient`.
    pub objective: f64,
    pub mean_k: f64,
    pub entropy: f64,
}

struct PolicyStep {
    loss: f64,
    mean_k: f64,
    entropy: f64,
}
