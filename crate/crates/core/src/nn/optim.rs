use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{ensure_finite, Error, Result};

const EPSILON: f64 = 1e-8;
const RMSPROP_DECAY: f64 = 0.99;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerAlgorithm {
    #[serde(alias = "rms")]
    RmsProp,
    Adam,
}

/// Multiplies the learning rate by `rate` every `interval` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub rate: f64,
    pub interval: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerAlgorithm,
    pub learning_rate: f64,
    #[serde(default)]
    pub decay: Option<LrDecay>,
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self {
            algorithm: OptimizerAlgorithm::RmsProp,
            learning_rate,
            decay: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            algorithm: OptimizerAlgorithm::Adam,
            learning_rate,
            decay: None,
        }
    }

    pub fn build(&self, parameter_count: usize) -> Result<Optimizer> {
        Optimizer::new(*self, parameter_count)
    }
}

/// Per-parameter optimizer state. Always minimizes; callers doing gradient
/// ascent pass the negated gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, parameter_count: usize) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        if let Some(decay) = config.decay {
            if decay.interval == 0 || !(decay.rate > 0.0 && decay.rate <= 1.0) {
                return Err(Error::Config(format!("invalid learning-rate decay {decay:?}")));
            }
        }
        Ok(Self {
            config,
            learning_rate: config.learning_rate,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            steps: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn algorithm(&self) -> OptimizerAlgorithm {
        self.config.algorithm
    }

    /// Applies one descent step to `parameters`.
    pub fn step(&mut self, parameters: &mut [f64], gradient: &[f64]) -> Result<()> {
        if gradient.len() != self.first_moment.len() {
            return Err(Error::dimension("optimizer gradient", self.first_moment.len(), gradient.len()));
        }
        if parameters.len() != gradient.len() {
            return Err(Error::dimension("optimizer parameters", gradient.len(), parameters.len()));
        }
        ensure_finite(gradient, "gradient")?;
        self.steps += 1;
        let lr = self.learning_rate;
        match self.config.algorithm {
            OptimizerAlgorithm::RmsProp => {
                for ((p, &g), v) in parameters.iter_mut().zip(gradient).zip(&mut self.second_moment) {
                    *v = RMSPROP_DECAY * *v + (1.0 - RMSPROP_DECAY) * g * g;
                    *p -= lr * g / (v.sqrt() + EPSILON);
                }
            }
            OptimizerAlgorithm::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, &g), m), v) in parameters
                    .iter_mut()
                    .zip(gradient)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                }
            }
        }
        if let Some(decay) = self.config.decay {
            if self.steps.is_multiple_of(decay.interval) {
                self.learning_rate *= decay.rate;
            }
        }
        Ok(())
    }

    /// One descent step on a network's parameters.
    pub fn apply(&mut self, network: &mut Network, gradient: &[f64]) -> Result<()> {
        self.step(network.parameters_mut(), gradient)
    }
}
