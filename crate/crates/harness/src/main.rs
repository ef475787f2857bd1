use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wmpg_harness::ablation::{ablation_grid, cell_label, Axis};
use wmpg_harness::bench::{estimator_benchmark, BenchEstimator};
use wmpg_harness::plot::emit_plot;
use wmpg_harness::runner::{run_experiment, ExperimentOutcome};
use wmpg_harness::spec::ExperimentSpec;
use wmpg_harness::stats::{median_episodes_to_threshold, SOLVED_RETURN};
use wmpg_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "wmpg", version, about = "Train, ablate and benchmark world-model policy-gradient agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment spec.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one experiment per value of a single estimator setting.
    Ablate {
        spec: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        /// Comma-separated values, e.g. `1,2` or `0.25,0.5,0.75`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Resampling benchmark of the estimators on random instances.
    BenchEstimator {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1_000_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write `bench.csv`.
        #[arg(long, default_value = "runs/bench")]
        out_dir: PathBuf,
    },
    /// Render an aggregate CSV as an SVG learning curve.
    Plot {
        csv: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// A seed count `N` (seeds 0..N), a range `A..B`, or a list `3,5,8`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || HarnessError::Config(format!("cannot parse seeds `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    if s.contains(',') {
        return s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.trim().parse().map_err(|_| bad())?;
    Ok((0..n).collect())
}

impl Overrides {
    fn load(&self, path: &Path) -> Result<(ExperimentSpec, usize)> {
        let mut spec = ExperimentSpec::from_file(path)?;
        if let Some(s) = &self.seeds {
            spec.seeds = parse_seeds(s)?;
        }
        if let Some(e) = self.episodes {
            spec.episodes = e;
        }
        if let Some(d) = &self.out_dir {
            spec.out_dir = d.clone();
        }
        spec.validate()?;
        let jobs = self
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(HarnessError::Config("--jobs must be at least 1".into()));
        }
        Ok((spec, jobs))
    }
}

fn summarize(outcome: &ExperimentOutcome) {
    let hits = outcome.episodes_to_solve();
    for (record, hit) in outcome.records.iter().zip(&hits) {
        let last = record.trailing_means().last().copied().unwrap_or(f64::NAN);
        let status = match &record.failure {
            Some(e) => format!("FAILED after {} episodes: {e}", record.rows.len()),
            None => format!(
                "final trailing-20 {last:.1}, solved at {}",
                hit.map_or("-".to_string(), |h| h.to_string())
            ),
        };
        println!("  seed {:>4}: {status}", record.seed);
    }
    let solved = hits.iter().filter(|h| h.is_some()).count();
    println!(
        "  {solved}/{} seeds reached a trailing-20 mean of {SOLVED_RETURN}; median episodes to get there {:.1}",
        hits.len(),
        median_episodes_to_threshold(&hits, outcome.spec.episodes)
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { spec, overrides } => {
            let (spec, jobs) = overrides.load(&spec)?;
            println!("{} [{}]: {} seeds x {} episodes", spec.name, &spec.config_hash()[..12], spec.seeds.len(), spec.episodes);
            let outcome = run_experiment(&spec, jobs)?;
            summarize(&outcome);
            println!("wrote {}", spec.out_dir.display());
            Ok(outcome.failed_seeds().is_empty())
        }
        Command::Ablate {
            spec,
            axis,
            values,
            overrides,
        } => {
            let (spec, jobs) = overrides.load(&spec)?;
            let outcome = ablation_grid(&spec, axis, &values, jobs)?;
            for (value, cell) in outcome.values.iter().zip(&outcome.cells) {
                println!("{}:", cell_label(axis, *value));
                summarize(cell);
            }
            println!("wrote {}", spec.out_dir.display());
            Ok(outcome.failed_seeds() == 0)
        }
        Command::BenchEstimator {
            instances,
            resamples,
            seed,
            out_dir,
        } => {
            let report = estimator_benchmark(instances, resamples, seed)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| HarnessError::io(&out_dir, e))?;
            let path = out_dir.join("bench.csv");
            report.write_csv(&path)?;
            println!("{:>4} {:>3} {:>3} {:<24} {:>9} {:>9} {:>11} {:>12} {:>9}", "inst", "|A|", "k", "estimator", "value_z", "max|z|", "exact_bias", "variance", "vs_mc");
            for r in &report.rows {
                println!(
                    "{:>4} {:>3} {:>3} {:<24} {:>9.3} {:>9.3} {:>11.3e} {:>12.5e} {:>9.4}",
                    r.instance,
                    r.num_actions,
                    r.k,
                    serde_json::to_value(r.estimator).map_or(String::new(), |v| v.as_str().unwrap_or("").to_string()),
                    r.value_z,
                    r.max_abs_gradient_z,
                    r.exact_bias,
                    r.empirical_variance,
                    r.variance_ratio_to_mc
                );
            }
            let worst = report
                .rows_for(BenchEstimator::HtPlain)
                .map(|r| r.value_z.abs())
                .fold(0.0, f64::max);
            println!("largest |value z| for ht-plain: {worst:.3}");
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Plot { csv, output } => {
            emit_plot(&csv, &output)?;
            println!("wrote {}", output.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
