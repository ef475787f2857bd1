//! One experiment per value of a single estimator setting.

use std::fs;

use serde::Serialize;

use wmpg::estimator::KStrategy;

use crate::error::{HarnessError, Result};
use crate::plot::{render_svg, Series};
use crate::runner::{execute, write_outputs, write_text, ExperimentOutcome};
use crate::spec::ExperimentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Without-replacement sample size (constant strategy).
    K,
    /// Imagination horizon.
    H,
    Lambda,
}

impl std::str::FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Axis::K),
            "h" => Ok(Axis::H),
            "lambda" => Ok(Axis::Lambda),
            other => Err(HarnessError::Config(format!("unknown axis `{other}` (expected k, h or lambda)"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::K => "k",
            Axis::H => "h",
            Axis::Lambda => "lambda",
        })
    }
}

fn positive_integer(axis: Axis, value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value.is_finite() {
        Ok(value as usize)
    } else {
        Err(HarnessError::Config(format!("{axis} = {value} must be a positive integer")))
    }
}

/// A copy of `base` with `axis` set to `value`, writing into its own subdirectory.
pub fn cell_spec(base: &ExperimentSpec, axis: Axis, value: f64) -> Result<ExperimentSpec> {
    let mut spec = base.clone();
    match axis {
        Axis::K => spec.agent.estimator.k = KStrategy::Constant { k: positive_integer(axis, value)? },
        Axis::H => spec.agent.estimator.horizon = positive_integer(axis, value)?,
        Axis::Lambda => {
            if !(0.0..=1.0).contains(&value) {
                return Err(HarnessError::Config(format!("lambda = {value} outside [0, 1]")));
            }
            spec.agent.estimator.lambda = value;
        }
    }
    let label = cell_label(axis, value);
    spec.name = format!("{}-{label}", base.name);
    spec.out_dir = base.out_dir.join(&label);
    spec.validate()?;
    Ok(spec)
}

pub fn cell_label(axis: Axis, value: f64) -> String {
    format!("{axis}={value}")
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub cells: Vec<ExperimentOutcome>,
}

impl AblationOutcome {
    pub fn failed_seeds(&self) -> usize {
        self.cells.iter().map(|c| c.failed_seeds().len()).sum()
    }
}

/// Runs every cell without writing anything. All cells are validated before
/// the first one starts.
pub fn execute_grid(base: &ExperimentSpec, axis: Axis, values: &[f64], jobs: usize) -> Result<AblationOutcome> {
    if values.is_empty() {
        return Err(HarnessError::Config("an ablation needs at least one value".into()));
    }
    let specs = values
        .iter()
        .map(|&v| cell_spec(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let cells = specs.iter().map(|s| execute(s, jobs)).collect::<Result<Vec<_>>>()?;
    Ok(AblationOutcome {
        axis,
        values: values.to_vec(),
        cells,
    })
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    axis: &'a str,
    value: f64,
    episode: usize,
    seeds: usize,
    mean_return: f64,
    sd_return: f64,
    trailing20_mean: f64,
    trailing20_median: f64,
}

/// Runs the grid and writes each cell's outputs plus `ablation_<axis>.csv`
/// and `ablation_<axis>.svg` in the base output directory.
pub fn ablation_grid(base: &ExperimentSpec, axis: Axis, values: &[f64], jobs: usize) -> Result<AblationOutcome> {
    let outcome = execute_grid(base, axis, values, jobs)?;
    for cell in &outcome.cells {
        write_outputs(cell)?;
    }
    let dir = &base.out_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let axis_name = axis.to_string();
    let csv_path = dir.join(format!("ablation_{axis_name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (value, cell) in outcome.values.iter().zip(&outcome.cells) {
        for row in &cell.aggregate {
            w.serialize(ComparisonRow {
                axis: &axis_name,
                value: *value,
                episode: row.episode,
                seeds: row.seeds,
                mean_return: row.mean_return,
                sd_return: row.sd_return,
                trailing20_mean: row.trailing20_mean,
                trailing20_median: row.trailing20_median,
            })?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(&csv_path, e))?;
    let series: Vec<Series> = outcome
        .values
        .iter()
        .zip(&outcome.cells)
        .map(|(&v, c)| Series::smoothed(&cell_label(axis, v), &c.aggregate))
        .collect();
    let title = format!("{}: {axis_name} ablation (trailing-20 mean)", base.name);
    write_text(&dir.join(format!("ablation_{axis_name}.svg")), &render_svg(&series, &title))?;
    Ok(outcome)
}
