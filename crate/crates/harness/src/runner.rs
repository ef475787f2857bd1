//! Multi-seed training runs and their CSV / JSON outputs.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use wmpg::agent::{Agent, EpisodeReport};

use crate::error::{HarnessError, Result};
use crate::plot::{render_svg, Series};
use crate::spec::ExperimentSpec;
use crate::stats::{self, SOLVED_RETURN, TRAILING_WINDOW};

pub const EPISODE_HEADER: [&str; 8] = [
    "episode",
    "return",
    "policy_loss",
    "value_loss",
    "transition_loss",
    "reward_loss",
    "mean_k",
    "entropy",
];

pub const AGGREGATE_HEADER: [&str; 9] = [
    "episode",
    "seeds",
    "mean_return",
    "sd_return",
    "lower_2sd",
    "upper_2sd",
    "trailing20_mean",
    "trailing20_sd",
    "trailing20_median",
];

/// One episode of one run. Loss columns average over the learning phases
/// that ran during the episode and are NaN when none did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub transition_loss: f64,
    pub reward_loss: f64,
    pub mean_k: f64,
    pub entropy: f64,
}

impl From<&EpisodeReport> for EpisodeRow {
    fn from(r: &EpisodeReport) -> Self {
        Self {
            episode: r.episode,
            episode_return: r.episode_return,
            policy_loss: r.mean_metric(|m| m.policy_loss),
            value_loss: r.mean_metric(|m| m.value_loss),
            transition_loss: r.mean_metric(|m| m.transition_loss),
            reward_loss: r.mean_metric(|m| m.reward_loss),
            mean_k: r.mean_metric(|m| m.mean_k),
            entropy: r.mean_metric(|m| m.entropy),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    /// Why the run stopped before its episode budget.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.episode_return).collect()
    }

    pub fn trailing_means(&self) -> Vec<f64> {
        stats::trailing_means(&self.returns(), TRAILING_WINDOW)
    }

    pub fn episodes_to_solve(&self) -> Option<usize> {
        stats::episodes_to_threshold(&self.returns(), TRAILING_WINDOW, SOLVED_RETURN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub episode: usize,
    /// Runs that reached this episode.
    pub seeds: usize,
    pub mean_return: f64,
    pub sd_return: f64,
    pub lower_2sd: f64,
    pub upper_2sd: f64,
    pub trailing20_mean: f64,
    pub trailing20_sd: f64,
    pub trailing20_median: f64,
}

/// Per-episode statistics across runs, in episode order.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let longest = records.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    let trailing: Vec<Vec<f64>> = records.iter().map(RunRecord::trailing_means).collect();
    (0..longest)
        .map(|i| {
            let raw: Vec<f64> = records
                .iter()
                .filter_map(|r| r.rows.get(i).map(|row| row.episode_return))
                .collect();
            let smooth: Vec<f64> = trailing.iter().filter_map(|t| t.get(i).copied()).collect();
            let mean = stats::mean(&raw);
            let sd = stats::sample_sd(&raw);
            AggregateRow {
                episode: i + 1,
                seeds: raw.len(),
                mean_return: mean,
                sd_return: sd,
                lower_2sd: mean - 2.0 * sd,
                upper_2sd: mean + 2.0 * sd,
                trailing20_mean: stats::mean(&smooth),
                trailing20_sd: stats::sample_sd(&smooth),
                trailing20_median: stats::median(&smooth),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    /// In the order of `spec.seeds`.
    pub records: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentOutcome {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.records.iter().filter(|r| r.failure.is_some()).map(|r| r.seed).collect()
    }

    pub fn episodes_to_solve(&self) -> Vec<Option<usize>> {
        self.records.iter().map(RunRecord::episodes_to_solve).collect()
    }
}

/// Trains one agent for the spec's episode budget, pushing a row per episode.
pub fn train_seed(spec: &ExperimentSpec, seed: u64, rows: &mut Vec<EpisodeRow>) -> wmpg::Result<()> {
    let mut env = spec.build_environment();
    let mut agent = Agent::new(spec.agent_for_seed(seed), env.observation_dim(), env.num_actions())?;
    // the environment draws from its own stream of the same seed
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(1);
    for _ in 0..spec.episodes {
        let report = agent.run_episode(env.as_mut(), &mut env_rng)?;
        rows.push(EpisodeRow::from(&report));
    }
    Ok(())
}

/// Runs `train` for one seed. Errors and panics end the run early and are
/// recorded, never propagated.
pub fn run_seed_with<F>(spec: &ExperimentSpec, seed: u64, train: &F) -> RunRecord
where
    F: Fn(&ExperimentSpec, u64, &mut Vec<EpisodeRow>) -> wmpg::Result<()>,
{
    let started = Instant::now();
    let mut rows = Vec::with_capacity(spec.episodes);
    let outcome = catch_unwind(AssertUnwindSafe(|| train(spec, seed, &mut rows)));
    let failure = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(format!("panicked: {}", panic_message(&panic))),
    };
    RunRecord {
        seed,
        rows,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash: spec.config_hash(),
        failure,
    }
}

pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> RunRecord {
    run_seed_with(spec, seed, &train_seed)
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs every seed on a pool of `jobs` workers without writing anything.
pub fn execute(spec: &ExperimentSpec, jobs: usize) -> Result<ExperimentOutcome> {
    execute_with(spec, jobs, train_seed)
}

/// [`execute`] with a custom per-seed training routine.
pub fn execute_with<F>(spec: &ExperimentSpec, jobs: usize, train: F) -> Result<ExperimentOutcome>
where
    F: Fn(&ExperimentSpec, u64, &mut Vec<EpisodeRow>) -> wmpg::Result<()> + Sync,
{
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> =
        pool.install(|| spec.seeds.par_iter().map(|&s| run_seed_with(spec, s, &train)).collect());
    let aggregate = aggregate(&records);
    Ok(ExperimentOutcome {
        spec: spec.clone(),
        config_hash: spec.config_hash(),
        records,
        aggregate,
    })
}

/// Runs the experiment and writes `seed_<n>.csv`, `aggregate.csv`,
/// `aggregate.svg` and `manifest.json` into the spec's output directory.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<ExperimentOutcome> {
    let outcome = execute(spec, jobs)?;
    write_outputs(&outcome)?;
    Ok(outcome)
}

pub fn seed_csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

pub fn write_outputs(outcome: &ExperimentOutcome) -> Result<()> {
    let dir = &outcome.spec.out_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for record in &outcome.records {
        write_episode_csv(&seed_csv_path(dir, record.seed), &record.rows)?;
    }
    write_aggregate_csv(&dir.join("aggregate.csv"), &outcome.aggregate)?;
    let series = Series::raw(&outcome.spec.name, &outcome.aggregate);
    write_text(&dir.join("aggregate.svg"), &render_svg(&[series], &outcome.spec.name))?;
    write_text(&dir.join("manifest.json"), &manifest(outcome)?)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

pub fn write_episode_csv(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(EPISODE_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_episode_csv(path: &Path) -> Result<Vec<EpisodeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for result in r.deserialize() {
        rows.push(result.map_err(|e| parse_error(path, e))?);
    }
    Ok(rows)
}

pub(crate) fn parse_error(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: match e.kind() {
            csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
            _ => e.to_string(),
        },
    }
}

#[derive(Serialize)]
struct SeedSummary<'a> {
    seed: u64,
    status: &'a str,
    error: Option<&'a str>,
    episodes_completed: usize,
    wall_clock_secs: f64,
    final_trailing20: Option<f64>,
    episodes_to_solve: Option<usize>,
}

fn manifest(outcome: &ExperimentOutcome) -> Result<String> {
    let seeds: Vec<SeedSummary> = outcome
        .records
        .iter()
        .map(|r| SeedSummary {
            seed: r.seed,
            status: if r.failure.is_some() { "failed" } else { "ok" },
            error: r.failure.as_deref(),
            episodes_completed: r.rows.len(),
            wall_clock_secs: r.wall_clock_secs,
            final_trailing20: r.trailing_means().last().copied(),
            episodes_to_solve: r.episodes_to_solve(),
        })
        .collect();
    let value = serde_json::json!({
        "name": outcome.spec.name,
        "config_hash": outcome.config_hash,
        "spec": outcome.spec,
        "failed_seeds": outcome.failed_seeds(),
        "seeds": seeds,
    });
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}
