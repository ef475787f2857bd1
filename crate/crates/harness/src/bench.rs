//! Resampling benchmark of the without-replacement estimators on random
//! single-state instances, against exact answers obtained by enumerating
//! every ordered sample.
//!
//! Gradients are taken with respect to the softmax logits, where the score
//! of action `a` is `e_a − π`, so `Σ_a c_a ∇ log π(a) = c − π Σ_a c_a`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use wmpg::estimator::{
    corrected_baseline_coefficients, ht_coefficients, normalized_coefficients, StateGradientInput,
};
use wmpg::swor::{gumbel_top_k, inclusion_probabilities_exact, CategoricalDistribution, SworSample};

use crate::error::{HarnessError, Result};

pub const ACTION_COUNTS: [usize; 4] = [2, 3, 4, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchEstimator {
    HtPlain,
    HtCorrectedBaseline,
    HtNormalized,
    /// Mean of `k` independent single-action estimates.
    McWithReplacement,
}

pub const ESTIMATORS: [BenchEstimator; 4] = [
    BenchEstimator::HtPlain,
    BenchEstimator::HtCorrectedBaseline,
    BenchEstimator::HtNormalized,
    BenchEstimator::McWithReplacement,
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchInstance {
    pub probabilities: Vec<f64>,
    pub q_values: Vec<f64>,
}

impl BenchInstance {
    fn random<R: Rng>(num_actions: usize, rng: &mut R) -> Self {
        let logits: Vec<f64> = (0..num_actions).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probabilities: exps.iter().map(|e| e / total).collect(),
            q_values: (0..num_actions).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.probabilities.len()
    }

    /// `Σ_a π(a) Q(a)`.
    pub fn value(&self) -> f64 {
        self.probabilities.iter().zip(&self.q_values).map(|(p, q)| p * q).sum()
    }

    /// `π ⊙ (Q − V)`, the exact gradient with respect to the logits.
    pub fn exact_gradient(&self) -> Vec<f64> {
        let v = self.value();
        self.probabilities
            .iter()
            .zip(&self.q_values)
            .map(|(p, q)| p * (q - v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub instance: usize,
    pub num_actions: usize,
    pub k: usize,
    pub estimator: BenchEstimator,
    pub resamples: usize,
    /// Bias z-score of the estimator's value estimate against `Σ π Q`.
    pub value_z: f64,
    /// Largest absolute bias z-score over the gradient components.
    pub max_abs_gradient_z: f64,
    /// Norm of the exact bias of the gradient estimate.
    pub exact_bias: f64,
    /// Total (trace) variance of the gradient estimate over the resamples.
    pub empirical_variance: f64,
    pub exact_variance: f64,
    /// Empirical variance divided by the with-replacement estimate's at the same `k`.
    pub variance_ratio_to_mc: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub seed: u64,
    pub resamples: usize,
    pub instances: Vec<BenchInstance>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn rows_for(&self, estimator: BenchEstimator) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }
}

/// Welford accumulator over a vector-valued estimate plus a scalar.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    value_mean: f64,
    value_m2: f64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            value_mean: 0.0,
            value_m2: 0.0,
        }
    }

    fn push(&mut self, g: &[f64], value: f64) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(g) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
        let delta = value - self.value_mean;
        self.value_mean += delta / self.n;
        self.value_m2 += delta * (value - self.value_mean);
    }

    fn variances(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / (self.n - 1.0).max(1.0)).collect()
    }

    fn value_variance(&self) -> f64 {
        self.value_m2 / (self.n - 1.0).max(1.0)
    }
}

/// Bias z-score; a difference at rounding level counts as no bias at all.
fn z_score(mean: f64, target: f64, variance: f64, n: f64) -> f64 {
    let diff = mean - target;
    if diff.abs() <= 1e-12 * target.abs().max(1.0) {
        return 0.0;
    }
    let se = (variance / n).sqrt();
    if se > 0.0 {
        diff / se
    } else {
        diff.signum() * f64::INFINITY
    }
}

fn logit_gradient(c: &[f64], p: &[f64]) -> Vec<f64> {
    let total: f64 = c.iter().sum();
    c.iter().zip(p).map(|(ci, pi)| ci - pi * total).collect()
}

/// Gradient and value estimate of one without-replacement estimator. Sums
/// run in ascending action order, so a full sample gives the same bits
/// whatever order it was drawn in.
fn swor_estimate(estimator: BenchEstimator, input: &StateGradientInput) -> wmpg::Result<(Vec<f64>, f64)> {
    let plain = ht_coefficients(input)?;
    let ht_value: f64 = plain.iter().sum();
    let (c, value) = match estimator {
        BenchEstimator::HtPlain => (plain, ht_value),
        BenchEstimator::HtCorrectedBaseline => (corrected_baseline_coefficients(input)?, ht_value),
        BenchEstimator::HtNormalized => {
            let mut weights = vec![0.0; input.num_actions()];
            for (&a, &o) in input.sample.actions.iter().zip(&input.sample.inclusion_probabilities) {
                weights[a] = input.probabilities[a] / o;
            }
            (normalized_coefficients(input)?, ht_value / weights.iter().sum::<f64>())
        }
        BenchEstimator::McWithReplacement => unreachable!("not a without-replacement estimator"),
    };
    Ok((logit_gradient(&c, input.probabilities), value))
}

fn mc_estimate(inst: &BenchInstance, draws: &[usize]) -> (Vec<f64>, f64) {
    let n = inst.num_actions();
    let mut c = vec![0.0; n];
    let mut value = 0.0;
    for &a in draws {
        c[a] += inst.q_values[a] / draws.len() as f64;
        value += inst.q_values[a] / draws.len() as f64;
    }
    (logit_gradient(&c, &inst.probabilities), value)
}

/// Ordered `k`-prefixes of a without-replacement draw with their probabilities.
pub fn ordered_samples(p: &[f64], k: usize) -> Vec<(Vec<usize>, f64)> {
    fn go(p: &[f64], k: usize, prefix: &mut Vec<usize>, prob: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        if prefix.len() == k {
            out.push((prefix.clone(), prob));
            return;
        }
        let left: f64 = (0..p.len()).filter(|a| !prefix.contains(a)).map(|a| p[a]).sum();
        for a in 0..p.len() {
            if !prefix.contains(&a) {
                prefix.push(a);
                go(p, k, prefix, prob * p[a] / left, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(p, k, &mut Vec::new(), 1.0, &mut out);
    out
}

/// Exact mean gradient and total variance of a without-replacement estimator.
fn enumerated_moments(inst: &BenchInstance, k: usize, omega: &[f64], estimator: BenchEstimator) -> wmpg::Result<(Vec<f64>, f64)> {
    let samples = ordered_samples(&inst.probabilities, k);
    let mut estimates = Vec::with_capacity(samples.len());
    for (actions, prob) in samples {
        let sample = SworSample {
            inclusion_probabilities: actions.iter().map(|&a| omega[a]).collect(),
            actions,
        };
        let q: Vec<f64> = sample.actions.iter().map(|&a| inst.q_values[a]).collect();
        let (g, _) = swor_estimate(estimator, &StateGradientInput::new(&inst.probabilities, &sample, &q))?;
        estimates.push((g, prob));
    }
    let mut mean = vec![0.0; inst.num_actions()];
    for (g, prob) in &estimates {
        mean.iter_mut().zip(g).for_each(|(m, x)| *m += prob * x);
    }
    let variance = estimates
        .iter()
        .map(|(g, prob)| prob * g.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum();
    Ok((mean, variance))
}

/// Total variance of the `k`-draw with-replacement estimator.
fn mc_exact_variance(inst: &BenchInstance, k: usize) -> f64 {
    let exact = inst.exact_gradient();
    let n = inst.num_actions();
    let second: f64 = (0..n)
        .map(|a| {
            let (g, _) = mc_estimate(inst, &[a]);
            inst.probabilities[a] * g.iter().map(|x| x * x).sum::<f64>()
        })
        .sum();
    (second - exact.iter().map(|x| x * x).sum::<f64>()).max(0.0) / k as f64
}

fn bench_pair(index: usize, inst: &BenchInstance, k: usize, resamples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BenchRow>> {
    let n = inst.num_actions();
    let dist = CategoricalDistribution::new(inst.probabilities.clone())?;
    let omega = inclusion_probabilities_exact(&dist, k)?;
    let swor = [BenchEstimator::HtPlain, BenchEstimator::HtCorrectedBaseline, BenchEstimator::HtNormalized];
    let mut moments = vec![Moments::new(n); 4];
    let mut draws = Vec::with_capacity(k);
    for _ in 0..resamples {
        let actions = gumbel_top_k(&dist, k, rng)?;
        // the k = 1 with-replacement estimate reuses the same draw
        draws.clear();
        if k == 1 {
            draws.push(actions[0]);
        } else {
            draws.extend((0..k).map(|_| dist.sample(rng)));
        }
        let sample = SworSample {
            inclusion_probabilities: actions.iter().map(|&a| omega[a]).collect(),
            actions,
        };
        let q: Vec<f64> = sample.actions.iter().map(|&a| inst.q_values[a]).collect();
        let input = StateGradientInput::new(&inst.probabilities, &sample, &q);
        for (m, &e) in moments.iter_mut().zip(&swor) {
            let (g, v) = swor_estimate(e, &input)?;
            m.push(&g, v);
        }
        let (g, v) = mc_estimate(inst, &draws);
        moments[3].push(&g, v);
    }

    let exact = inst.exact_gradient();
    let value = inst.value();
    let mc_variance: f64 = moments[3].variances().iter().sum();
    let mut rows = Vec::with_capacity(4);
    for (m, estimator) in moments.iter().zip(ESTIMATORS) {
        let variances = m.variances();
        let (exact_mean, exact_variance) = match estimator {
            BenchEstimator::McWithReplacement => (exact.clone(), mc_exact_variance(inst, k)),
            e => enumerated_moments(inst, k, &omega, e)?,
        };
        let max_abs_gradient_z = (0..n)
            .map(|j| z_score(m.mean[j], exact[j], variances[j], m.n).abs())
            .fold(0.0, f64::max);
        let empirical_variance: f64 = variances.iter().sum();
        rows.push(BenchRow {
            instance: index,
            num_actions: n,
            k,
            estimator,
            resamples,
            value_z: z_score(m.value_mean, value, m.value_variance(), m.n),
            max_abs_gradient_z,
            exact_bias: exact_mean
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
            empirical_variance,
            exact_variance,
            variance_ratio_to_mc: if mc_variance > 0.0 {
                empirical_variance / mc_variance
            } else {
                f64::NAN
            },
        });
    }
    Ok(rows)
}

/// Benchmarks every valid `k` of `instances` random instances, whose action
/// counts cycle through [`ACTION_COUNTS`]. Each (instance, k) pair draws from
/// its own stream of `seed`, so the report does not depend on scheduling.
pub fn estimator_benchmark(instances: usize, resamples: usize, seed: u64) -> Result<BenchReport> {
    if instances == 0 || resamples < 2 {
        return Err(HarnessError::Config(
            "the benchmark needs at least one instance and two resamples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated: Vec<BenchInstance> = (0..instances)
        .map(|i| BenchInstance::random(ACTION_COUNTS[i % ACTION_COUNTS.len()], &mut rng))
        .collect();
    let pairs: Vec<(usize, usize)> = generated
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| (1..=inst.num_actions()).map(move |k| (i, k)))
        .collect();
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(stream, &(i, k))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64 + 1);
            bench_pair(i, &generated[i], k, resamples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(BenchReport {
        seed,
        resamples,
        instances: generated,
        rows,
    })
}
