use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorVariant, KStrategy};
use crate::nn::{Activation, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Imagined without-replacement policy gradient.
    Wmpg,
    /// Actor-critic with single-sample Monte Carlo gradients.
    Ac,
    /// Mean actor-critic: exact expectation over a learned Q-network.
    Mac,
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgentKind::Wmpg => "wmpg",
            AgentKind::Ac => "ac",
            AgentKind::Mac => "mac",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl NetworkConfig {
    pub fn new(hidden: Vec<usize>, optimizer: OptimizerConfig) -> Self {
        Self {
            hidden,
            activation: Activation::Relu,
            optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub batch_size: usize,
    /// Policy updates per learning phase.
    pub general_iterations: usize,
    /// Value (or Q-network) updates per learning phase.
    pub value_iterations: usize,
    /// World-model updates per learning phase.
    pub world_model_iterations: usize,
    pub estimator: EstimatorConfig,
    pub policy: NetworkConfig,
    /// The value network, or the Q-network for MAC.
    pub value: NetworkConfig,
    pub transition: NetworkConfig,
    pub reward: NetworkConfig,
    /// Transition network predicts `z' − z`.
    #[serde(default = "yes")]
    pub residual_transition: bool,
    pub world_model_capacity: usize,
    /// Also regress `V` to zero at states where an episode terminated (not
    /// truncated). Ignored by MAC.
    #[serde(default = "yes")]
    pub anchor_terminal_values: bool,
    /// The value (or Q) network predicts returns divided by this factor.
    #[serde(default = "unit")]
    pub value_scale: f64,
    #[serde(default)]
    pub entropy_coefficient: f64,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

impl AgentConfig {
    /// Best CartPole WMPG settings; non-model settings follow the AC preset.
    pub fn wmpg_cartpole() -> Self {
        Self {
            kind: AgentKind::Wmpg,
            batch_size: 32,
            general_iterations: 5,
            value_iterations: 3,
            world_model_iterations: 5,
            estimator: EstimatorConfig {
                variant: EstimatorVariant::HtNormalized,
                k: KStrategy::Constant { k: 2 },
                lambda: 0.75,
                horizon: 15,
                gamma: 0.99,
                trajectories_per_action: 1,
            },
            policy: NetworkConfig::new(vec![32], OptimizerConfig::rmsprop(0.0025)),
            value: NetworkConfig::new(vec![64], OptimizerConfig::rmsprop(0.005)),
            transition: NetworkConfig::new(vec![64], OptimizerConfig::adam(0.005)),
            reward: NetworkConfig::new(vec![64], OptimizerConfig::adam(0.005)),
            residual_transition: true,
            world_model_capacity: 10_000,
            anchor_terminal_values: true,
            value_scale: 10.0,
            entropy_coefficient: 0.0,
            seed: 0,
        }
    }

    /// Best CartPole actor-critic settings.
    pub fn ac_cartpole() -> Self {
        Self {
            kind: AgentKind::Ac,
            general_iterations: 1,
            value_iterations: 1,
            world_model_iterations: 0,
            estimator: EstimatorConfig {
                variant: EstimatorVariant::SingleSampleMc,
                k: KStrategy::Constant { k: 1 },
                ..Self::wmpg_cartpole().estimator
            },
            value_scale: 1.0,
            ..Self::wmpg_cartpole()
        }
    }

    /// Best CartPole mean actor-critic settings.
    pub fn mac_cartpole() -> Self {
        Self {
            kind: AgentKind::Mac,
            general_iterations: 3,
            value_iterations: 3,
            world_model_iterations: 0,
            estimator: EstimatorConfig {
                variant: EstimatorVariant::ExactExpectation,
                k: KStrategy::Constant { k: 2 },
                ..Self::wmpg_cartpole().estimator
            },
            policy: NetworkConfig::new(vec![32], OptimizerConfig::rmsprop(0.00125)),
            value: NetworkConfig::new(vec![64, 64], OptimizerConfig::rmsprop(0.005)),
            value_scale: 1.0,
            ..Self::wmpg_cartpole()
        }
    }

    pub fn preset(kind: AgentKind) -> Self {
        match kind {
            AgentKind::Wmpg => Self::wmpg_cartpole(),
            AgentKind::Ac => Self::ac_cartpole(),
            AgentKind::Mac => Self::mac_cartpole(),
        }
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.general_iterations == 0 {
            return Err(Error::Config("general_iterations must be at least 1".into()));
        }
        if self.kind == AgentKind::Wmpg {
            self.estimator.validate(num_actions)?;
        } else if !(0.0..=1.0).contains(&self.estimator.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.estimator.gamma)));
        }
        if self.world_model_capacity == 0 {
            return Err(Error::Config("world_model_capacity must be at least 1".into()));
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return Err(Error::Config("value_scale must be positive".into()));
        }
        if !(self.entropy_coefficient >= 0.0) {
            return Err(Error::Config("entropy_coefficient must be non-negative".into()));
        }
        Ok(())
    }
}
