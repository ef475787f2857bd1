//! Experiment specs: a TOML file whose `[agent]` table overrides a preset.
//!
//! ```toml
//! name = "cartpole-wmpg"
//! environment = "cartpole"
//! episodes = 250
//! seeds = [0, 1, 2]
//!
//! [agent]
//! preset = "wmpg"
//! value_iterations = 3
//!
//! [agent.estimator]
//! horizon = 15
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use wmpg::agent::{AgentConfig, AgentKind};
use wmpg::env::{CartPole, ChainEnv, ChainMdpSpec, Environment};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvironmentKind {
    CartPole,
    /// Left/right chain with the goal at the far end.
    Chain,
}

impl std::str::FromStr for EnvironmentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(Self::CartPole),
            "chain" => Ok(Self::Chain),
            other => Err(HarnessError::Config(format!(
                "unknown environment `{other}` (expected cartpole or chain)"
            ))),
        }
    }
}

/// A fully resolved experiment. `agent.seed` is always 0 here; each run
/// replaces it with its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub environment: EnvironmentKind,
    /// Number of chain states; ignored for cart-pole.
    pub chain_states: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub agent: AgentConfig,
}

const TOP_LEVEL_KEYS: [&str; 7] = ["name", "environment", "chain_states", "episodes", "seeds", "out_dir", "agent"];

impl ExperimentSpec {
    /// The preset for `kind` on cart-pole with ten seeds and 250 episodes.
    pub fn preset(kind: AgentKind) -> Self {
        let mut agent = AgentConfig::preset(kind);
        agent.seed = 0;
        Self {
            name: format!("cartpole-{kind}"),
            environment: EnvironmentKind::CartPole,
            chain_states: 5,
            episodes: 250,
            seeds: (0..10).collect(),
            out_dir: PathBuf::from(format!("runs/cartpole-{kind}")),
            agent,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        if let Some(key) = table.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
            return Err(HarnessError::Config(format!("unknown key `{key}`")));
        }
        let mut agent_table = match table.remove("agent") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(HarnessError::Config("`agent` must be a table".into())),
            None => return Err(HarnessError::Config("missing [agent] table".into())),
        };
        if agent_table.contains_key("seed") {
            return Err(HarnessError::Config(
                "agent.seed is not allowed; runs take their seeds from the top-level `seeds` list".into(),
            ));
        }
        let kind = agent_kind(&mut agent_table)?;
        let mut spec = Self::preset(kind);
        spec.agent = merge_agent(&spec.agent, agent_table)?;

        if let Some(v) = table.remove("name") {
            spec.name = string(v, "name")?;
            spec.out_dir = PathBuf::from(format!("runs/{}", spec.name));
        }
        if let Some(v) = table.remove("environment") {
            spec.environment = string(v, "environment")?.parse()?;
        }
        if let Some(v) = table.remove("chain_states") {
            spec.chain_states = count(v, "chain_states")?;
        }
        if let Some(v) = table.remove("episodes") {
            spec.episodes = count(v, "episodes")?;
        }
        if let Some(v) = table.remove("seeds") {
            let Value::Array(items) = v else {
                return Err(HarnessError::Config("`seeds` must be an array of integers".into()));
            };
            spec.seeds = items
                .into_iter()
                .map(|s| match s {
                    Value::Integer(i) if i >= 0 => Ok(i as u64),
                    other => Err(HarnessError::Config(format!("invalid seed {other}"))),
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = table.remove("out_dir") {
            spec.out_dir = PathBuf::from(string(v, "out_dir")?);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(HarnessError::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.environment == EnvironmentKind::Chain && self.chain_states < 2 {
            return Err(HarnessError::Config("a chain needs at least two states".into()));
        }
        let env = self.build_environment();
        self.agent
            .validate(env.num_actions())
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn build_environment(&self) -> Box<dyn Environment + Send> {
        match self.environment {
            EnvironmentKind::CartPole => Box::new(CartPole::default()),
            EnvironmentKind::Chain => {
                Box::new(ChainEnv::new(ChainMdpSpec::standard(self.chain_states.max(2))).expect("standard chains are valid"))
            }
        }
    }

    /// Canonical JSON of the resolved spec.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("specs always serialize")
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Agent config for one run.
    pub fn agent_for_seed(&self, seed: u64) -> AgentConfig {
        AgentConfig {
            seed,
            ..self.agent.clone()
        }
    }
}

fn agent_kind(agent: &mut Table) -> Result<AgentKind> {
    let preset = agent.remove("preset").map(|v| string(v, "agent.preset")).transpose()?;
    let kind = agent.get("kind").cloned().map(|v| string(v, "agent.kind")).transpose()?;
    let name = match (preset, kind) {
        (Some(p), Some(k)) if p != k => {
            return Err(HarnessError::Config(format!(
                "agent.preset `{p}` conflicts with agent.kind `{k}`"
            )))
        }
        (Some(p), _) => p,
        (None, Some(k)) => k,
        (None, None) => return Err(HarnessError::Config("agent.preset (wmpg, ac or mac) is required".into())),
    };
    match name.as_str() {
        "wmpg" => Ok(AgentKind::Wmpg),
        "ac" => Ok(AgentKind::Ac),
        "mac" => Ok(AgentKind::Mac),
        other => Err(HarnessError::Config(format!("unknown agent preset `{other}`"))),
    }
}

/// Deep-merges `overrides` into the serialized preset, rejecting keys the
/// preset does not have.
fn merge_agent(preset: &AgentConfig, overrides: Table) -> Result<AgentConfig> {
    let Value::Table(mut base) = Value::try_from(preset).map_err(|e| HarnessError::Config(e.to_string()))? else {
        unreachable!("agent configs serialize to tables");
    };
    merge_into(&mut base, overrides, "agent")?;
    Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(format!("agent: {}", e.message())))
}

fn merge_into(base: &mut Table, overrides: Table, path: &str) -> Result<()> {
    for (key, value) in overrides {
        let here = format!("{path}.{key}");
        match (base.get_mut(&key), value) {
            // a tagged enum such as `k` is replaced wholesale when its tag changes
            (Some(Value::Table(b)), Value::Table(o)) if b.get("strategy").is_some() && o.get("strategy").is_some() => {
                *b = o;
            }
            (Some(Value::Table(b)), Value::Table(o)) => merge_into(b, o, &here)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(HarnessError::Config(format!("unknown key `{here}`"))),
        }
    }
    Ok(())
}

fn string(v: Value, key: &str) -> Result<String> {
    match v {
        Value::String(s) => Ok(s),
        other => Err(HarnessError::Config(format!("`{key}` must be a string, got {other}"))),
    }
}

fn count(v: Value, key: &str) -> Result<usize> {
    match v {
        Value::Integer(i) if i >= 0 => Ok(i as usize),
        other => Err(HarnessError::Config(format!("`{key}` must be a non-negative integer, got {other}"))),
    }
}
