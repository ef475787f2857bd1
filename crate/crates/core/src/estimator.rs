//! Per-state policy-gradient estimators.
//!
//! Every estimator is a weighted sum of score vectors,
//! `Σ_a c_a ∇θ log π(a|s)`, so each variant is written as a function that
//! produces the per-action coefficients `c_a` (indexed by action, zero for
//! actions that were not sampled). A [`ScoreFunction`] then turns the
//! coefficients into a parameter gradient. Contributions are always reduced
//! in ascending action order, which makes the output independent of the
//! order in which a without-replacement sample was drawn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Trace};
use crate::swor::SworSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorVariant {
    /// `Σ_a π(a) Q(a) ∇ log π(a)` over every action.
    ExactExpectation,
    /// `Q(a) ∇ log π(a)` for one sampled action (optionally minus a baseline).
    SingleSampleMc,
    /// Horvitz-Thompson weights `π/Ω` without baseline.
    HtPlain,
    /// Sampled value baseline with the action-dependent correction `C(s, a)`.
    HtCorrectedBaseline,
    /// Sampled value baseline with weights normalized by their sum.
    HtNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum KStrategy {
    Constant {
        k: usize,
    },
    LinearDecreasing {
        k_start: usize,
        k_end: usize,
        total_steps: u64,
    },
    EntropyScaled,
}

impl KStrategy {
    pub fn validate(&self, num_actions: usize) -> Result<()> {
        match *self {
            KStrategy::Constant { k } if k == 0 || k > num_actions => Err(Error::Config(format!(
                "constant k = {k} outside [1, {num_actions}]"
            ))),
            KStrategy::LinearDecreasing { k_start, k_end, .. }
                if k_end == 0 || k_start < k_end || k_start > num_actions =>
            {
                Err(Error::Config(format!(
                    "decreasing k needs {num_actions} >= k_start >= k_end >= 1 (got {k_start} -> {k_end})"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub variant: EstimatorVariant,
    pub k: KStrategy,
    pub lambda: f64,
    pub horizon: usize,
    pub gamma: f64,
    /// Imagined trajectories averaged per sampled root action.
    #[serde(default = "one")]
    pub trajectories_per_action: usize,
}

fn one() -> usize {
    1
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            variant: EstimatorVariant::HtNormalized,
            k: KStrategy::Constant { k: 2 },
            lambda: 0.75,
            horizon: 15,
            gamma: 0.99,
            trajectories_per_action: 1,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, num_actions: usize) -> Result<()> {
        self.k.validate(num_actions)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.trajectories_per_action == 0 {
            return Err(Error::Config("trajectories_per_action must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything an estimator needs at one state.
#[derive(Debug, Clone, Copy)]
pub struct StateGradientInput<'a> {
    /// Full policy distribution `π(·|s)`.
    pub probabilities: &'a [f64],
    pub sample: &'a SworSample,
    /// `Q̂(s, a_i)` aligned with `sample.actions`.
    pub q_values: &'a [f64],
}

/// One sampled action after validation.
#[derive(Debug, Clone, Copy)]
struct Term {
    action: usize,
    policy: f64,
    weight: f64,
    q: f64,
}

impl<'a> StateGradientInput<'a> {
    pub fn new(probabilities: &'a [f64], sample: &'a SworSample, q_values: &'a [f64]) -> Self {
        Self {
            probabilities,
            sample,
            q_values,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.probabilities.len()
    }

    /// Validated terms in ascending action order.
    fn terms(&self) -> Result<Vec<Term>> {
        let k = self.sample.actions.len();
        if k == 0 {
            return Err(Error::Precondition("empty action sample".into()));
        }
        if self.sample.inclusion_probabilities.len() != k {
            return Err(Error::dimension(
                "inclusion probabilities",
                k,
                self.sample.inclusion_probabilities.len(),
            ));
        }
        if self.q_values.len() != k {
            return Err(Error::dimension("Q-value estimates", k, self.q_values.len()));
        }
        let mut terms = Vec::with_capacity(k);
        for ((&action, &omega), &q) in self
            .sample
            .actions
            .iter()
            .zip(&self.sample.inclusion_probabilities)
            .zip(self.q_values)
        {
            let policy = *self.probabilities.get(action).ok_or_else(|| {
                Error::Precondition(format!(
                    "action {action} outside a {}-action policy",
                    self.probabilities.len()
                ))
            })?;
            if !(omega > 0.0) || !omega.is_finite() {
                return Err(Error::Numeric(format!(
                    "inclusion probability {omega} for action {action}"
                )));
            }
            terms.push(Term {
                action,
                policy,
                weight: policy / omega,
                q,
            });
        }
        terms.sort_by_key(|t| t.action);
        if terms.windows(2).any(|w| w[0].action == w[1].action) {
            return Err(Error::Precondition("sampled actions are not distinct".into()));
        }
        Ok(terms)
    }

    fn coefficients_from(&self, terms: &[Term], f: impl Fn(&Term) -> f64) -> Vec<f64> {
        let mut c = vec![0.0; self.num_actions()];
        for t in terms {
            c[t.action] = f(t);
        }
        c
    }
}

/// Turns per-action coefficients into `Σ_a c_a ∇θ log π(a|s)`.
pub trait ScoreFunction {
    fn parameter_count(&self) -> usize;

    fn weighted_score(&self, coefficients: &[f64]) -> Result<Vec<f64>>;
}

/// Explicit score vectors, one row per action.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::dimension("score matrix row", width, r.len()));
        }
        Ok(Self { rows })
    }

    /// Scores of a softmax policy with respect to its own logits:
    /// `∇_logits log π(a) = e_a − π`.
    pub fn softmax_logits(probabilities: &[f64]) -> Self {
        let n = probabilities.len();
        let rows = (0..n)
            .map(|a| {
                (0..n)
                    .map(|j| if j == a { 1.0 } else { 0.0 } - probabilities[j])
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.rows[action]
    }
}

impl ScoreFunction for ScoreMatrix {
    fn parameter_count(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn weighted_score(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        if coefficients.len() != self.rows.len() {
            return Err(Error::dimension("coefficients", self.rows.len(), coefficients.len()));
        }
        let mut out = vec![0.0; self.parameter_count()];
        for (row, &c) in self.rows.iter().zip(coefficients) {
            if c != 0.0 {
                for (o, &s) in out.iter_mut().zip(row) {
                    *o += c * s;
                }
            }
        }
        Ok(out)
    }
}

/// Scores of a softmax-output policy network at one state, by backpropagation.
pub struct NetworkScore<'a> {
    network: &'a Network,
    trace: &'a Trace,
}

impl<'a> NetworkScore<'a> {
    pub fn new(network: &'a Network, trace: &'a Trace) -> Self {
        Self { network, trace }
    }

    /// Accumulates `scale · Σ_a c_a ∇θ log π(a|s)` into `grad`.
    pub fn accumulate(&self, coefficients: &[f64], scale: f64, grad: &mut [f64]) -> Result<()> {
        let probs = self.trace.output();
        if coefficients.len() != probs.len() {
            return Err(Error::dimension("coefficients", probs.len(), coefficients.len()));
        }
        // ∇ log π_a = ∇π_a / π_a, so the probability-space output gradient is c_a / π_a.
        let output_gradient: Vec<f64> = coefficients
            .iter()
            .zip(probs)
            .map(|(&c, &p)| if c == 0.0 { 0.0 } else { c / p })
            .collect();
        self.network
            .accumulate_gradient(self.trace, &output_gradient, scale, grad)
    }
}

impl ScoreFunction for NetworkScore<'_> {
    fn parameter_count(&self) -> usize {
        self.network.parameter_count()
    }

    fn weighted_score(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.parameter_count()];
        self.accumulate(coefficients, 1.0, &mut grad)?;
        Ok(grad)
    }
}

/// `Σ_a c_a ln π(a)`, whose gradient is the estimator's gradient when the
/// coefficients are held fixed.
pub fn surrogate_objective(coefficients: &[f64], probabilities: &[f64]) -> f64 {
    coefficients
        .iter()
        .zip(probabilities)
        .filter(|(&c, _)| c != 0.0)
        .map(|(&c, &p)| c * p.ln())
        .sum()
}

pub fn exact_coefficients(input: &StateGradientInput) -> Result<Vec<f64>> {
    let terms = input.terms()?;
    for (a, &p) in input.probabilities.iter().enumerate() {
        if p > 0.0 && !terms.iter().any(|t| t.action == a) {
            return Err(Error::Precondition(format!(
                "exact expectation is missing action {a}"
            )));
        }
    }
    Ok(input.coefficients_from(&terms, |t| t.policy * t.q))
}

/// Single sampled action, `Q̂ − b` with an optional baseline `b`.
pub fn single_sample_coefficients(input: &StateGradientInput, baseline: Option<f64>) -> Result<Vec<f64>> {
    let terms = input.terms()?;
    if terms.len() != 1 {
        return Err(Error::Precondition(format!(
            "single-sample estimator needs exactly one action, got {}",
            terms.len()
        )));
    }
    let b = baseline.unwrap_or(0.0);
    Ok(input.coefficients_from(&terms, |t| t.q - b))
}

pub fn ht_coefficients(input: &StateGradientInput) -> Result<Vec<f64>> {
    let terms = input.terms()?;
    Ok(input.coefficients_from(&terms, |t| t.weight * t.q))
}

fn baseline_of(terms: &[Term]) -> f64 {
    terms.iter().map(|t| t.weight * t.q).sum()
}

/// `V̂(s) = Σ_i (π(a_i)/Ω(a_i)) Q̂(s, a_i)`.
pub fn swor_value_baseline(input: &StateGradientInput) -> Result<f64> {
    Ok(baseline_of(&input.terms()?))
}

pub fn corrected_baseline_coefficients(input: &StateGradientInput) -> Result<Vec<f64>> {
    let terms = input.terms()?;
    let v = baseline_of(&terms);
    Ok(input.coefficients_from(&terms, |t| {
        let correction = 1.0 + t.weight - t.policy;
        t.weight * (correction * t.q - v)
    }))
}

pub fn normalized_coefficients(input: &StateGradientInput) -> Result<Vec<f64>> {
    let terms = input.terms()?;
    let v = baseline_of(&terms);
    let total: f64 = terms.iter().map(|t| t.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!("weight sum {total} is not positive")));
    }
    let mut c = vec![0.0; input.num_actions()];
    for t in &terms {
        let w_i = total - t.weight + t.policy;
        if !(w_i > 0.0) {
            return Err(Error::Numeric(format!(
                "leave-one-out weight {w_i} for action {} is not positive",
                t.action
            )));
        }
        c[t.action] = t.weight * (t.q / w_i - v / total);
    }
    Ok(c)
}

/// Coefficients for any variant. With a single sampled action the baseline
/// variants degenerate, so they switch to `Q̂ − value_baseline` instead.
pub fn coefficients(
    variant: EstimatorVariant,
    input: &StateGradientInput,
    value_baseline: Option<f64>,
) -> Result<Vec<f64>> {
    match variant {
        EstimatorVariant::ExactExpectation => exact_coefficients(input),
        EstimatorVariant::SingleSampleMc => single_sample_coefficients(input, value_baseline),
        EstimatorVariant::HtPlain => ht_coefficients(input),
        EstimatorVariant::HtCorrectedBaseline | EstimatorVariant::HtNormalized
            if input.sample.k() == 1 =>
        {
            let b = value_baseline.ok_or_else(|| {
                Error::Precondition("k = 1 baseline variants need a value-network baseline".into())
            })?;
            single_sample_coefficients(input, Some(b))
        }
        EstimatorVariant::HtCorrectedBaseline => corrected_baseline_coefficients(input),
        EstimatorVariant::HtNormalized => normalized_coefficients(input),
    }
}

/// `Σ_a Q̂(s,a) ∇θ π(a|s)`, computed as `Σ_a π Q̂ ∇θ log π`.
pub fn exact_policy_gradient(input: &StateGradientInput, score: &dyn ScoreFunction) -> Result<Vec<f64>> {
    score.weighted_score(&exact_coefficients(input)?)
}

pub fn single_sample_gradient(input: &StateGradientInput, score: &dyn ScoreFunction) -> Result<Vec<f64>> {
    score.weighted_score(&single_sample_coefficients(input, None)?)
}

pub fn ht_gradient(input: &StateGradientInput, score: &dyn ScoreFunction) -> Result<Vec<f64>> {
    score.weighted_score(&ht_coefficients(input)?)
}

pub fn corrected_baseline_gradient(
    input: &StateGradientInput,
    score: &dyn ScoreFunction,
) -> Result<Vec<f64>> {
    score.weighted_score(&corrected_baseline_coefficients(input)?)
}

pub fn normalized_gradient(input: &StateGradientInput, score: &dyn ScoreFunction) -> Result<Vec<f64>> {
    score.weighted_score(&normalized_coefficients(input)?)
}

/// Number of without-replacement actions to draw at one state.
pub fn choose_k(strategy: &KStrategy, policy_entropy: f64, num_actions: usize, global_step: u64) -> usize {
    let n = num_actions.max(1);
    match *strategy {
        KStrategy::Constant { k } => k.clamp(1, n),
        KStrategy::LinearDecreasing {
            k_start,
            k_end,
            total_steps,
        } => {
            let frac = if total_steps == 0 {
                1.0
            } else {
                (global_step as f64 / total_steps as f64).min(1.0)
            };
            let k = k_start as f64 + (k_end as f64 - k_start as f64) * frac;
            (k.round() as usize).clamp(k_end.max(1), k_start.max(1)).min(n)
        }
        KStrategy::EntropyScaled => {
            if n == 1 {
                return 1;
            }
            let scaled = (n as f64 * policy_entropy / (n as f64).ln()).ceil();
            if scaled.is_nan() {
                return 1;
            }
            (scaled.max(1.0) as usize).clamp(1, n)
        }
    }
}

/// Componentwise mean of per-state gradients, reduced in list order.
pub fn batch_gradient(per_state: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_state
        .first()
        .ok_or_else(|| Error::Usage("batch gradient of an empty batch".into()))?;
    let mut sum = vec![0.0; first.len()];
    for g in per_state {
        if g.len() != sum.len() {
            return Err(Error::dimension("per-state gradient", sum.len(), g.len()));
        }
        for (s, &v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let n = per_state.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input<'a>(p: &'a [f64], s: &'a SworSample, q: &'a [f64]) -> StateGradientInput<'a> {
        StateGradientInput::new(p, s, q)
    }

    #[test]
    fn constant_q_exact_gradient_vanishes() {
        let p = [0.2, 0.5, 0.3];
        let s = SworSample::exhaustive(3);
        let q = [4.0; 3];
        let g = exact_policy_gradient(&input(&p, &s, &q), &ScoreMatrix::softmax_logits(&p)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_action_softmax_matches_closed_form() {
        // logits (0.3, -0.2), Q = (1, 0): ∂/∂l0 = π0 π1, ∂/∂l1 = -π0 π1
        let l: [f64; 2] = [0.3, -0.2];
        let z = l[0].exp() + l[1].exp();
        let p = [l[0].exp() / z, l[1].exp() / z];
        let s = SworSample::exhaustive(2);
        let g = exact_policy_gradient(&input(&p, &s, &[1.0, 0.0]), &ScoreMatrix::softmax_logits(&p)).unwrap();
        assert!((g[0] - p[0] * p[1]).abs() < 1e-15);
        assert!((g[1] + p[0] * p[1]).abs() < 1e-15);
    }

    #[test]
    fn exact_expectation_requires_every_supported_action() {
        let p = [0.5, 0.5];
        let s = SworSample::single(0, 0.5);
        assert!(matches!(
            exact_coefficients(&input(&p, &s, &[1.0])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn zero_inclusion_probability_is_a_numeric_error() {
        let p = [0.5, 0.5];
        let s = SworSample {
            actions: vec![0],
            inclusion_probabilities: vec![0.0],
        };
        assert!(matches!(ht_coefficients(&input(&p, &s, &[1.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn duplicate_actions_are_rejected() {
        let p = [0.5, 0.5];
        let s = SworSample {
            actions: vec![1, 1],
            inclusion_probabilities: vec![1.0, 1.0],
        };
        assert!(ht_coefficients(&input(&p, &s, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn q_length_must_match_sample() {
        let p = [0.5, 0.5];
        let s = SworSample::exhaustive(2);
        assert!(matches!(
            ht_coefficients(&input(&p, &s, &[1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn full_sample_baseline_is_exact_value() {
        let p = [0.2, 0.5, 0.3];
        let s = SworSample {
            actions: vec![2, 0, 1],
            inclusion_probabilities: vec![1.0; 3],
        };
        let q = [3.0, 1.0, 2.0];
        let v = swor_value_baseline(&input(&p, &s, &q)).unwrap();
        assert!((v - (0.2 * 1.0 + 0.5 * 2.0 + 0.3 * 3.0)).abs() < 1e-15);
        let c = [7.5; 3];
        assert_eq!(swor_value_baseline(&input(&p, &s, &c)).unwrap(), 7.5);
    }

    #[test]
    fn full_sample_baseline_variants_vanish_for_equal_q() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let s = SworSample::exhaustive(4);
        let q = [2.5; 4];
        for c in [
            corrected_baseline_coefficients(&input(&p, &s, &q)).unwrap(),
            normalized_coefficients(&input(&p, &s, &q)).unwrap(),
        ] {
            assert!(c.iter().all(|v| v.abs() < 1e-15), "{c:?}");
        }
    }

    #[test]
    fn k_one_baseline_variants_use_the_value_network() {
        let p = [0.25, 0.75];
        let s = SworSample::single(1, 0.75);
        let q = [3.0];
        let c = coefficients(EstimatorVariant::HtNormalized, &input(&p, &s, &q), Some(1.0)).unwrap();
        assert_eq!(c, vec![0.0, 2.0]);
        assert!(coefficients(EstimatorVariant::HtCorrectedBaseline, &input(&p, &s, &q), None).is_err());
    }

    #[test]
    fn choose_k_constant_and_decreasing() {
        assert_eq!(choose_k(&KStrategy::Constant { k: 2 }, 0.3, 2, 999), 2);
        let dec = KStrategy::LinearDecreasing {
            k_start: 4,
            k_end: 1,
            total_steps: 1000,
        };
        assert_eq!(choose_k(&dec, 0.0, 4, 0), 4);
        assert_eq!(choose_k(&dec, 0.0, 4, 500), 3);
        assert_eq!(choose_k(&dec, 0.0, 4, 1000), 1);
        assert_eq!(choose_k(&dec, 0.0, 4, 5000), 1);
    }

    #[test]
    fn choose_k_entropy_scaled_boundaries() {
        for n in 2..=8 {
            let h = (n as f64).ln();
            assert_eq!(choose_k(&KStrategy::EntropyScaled, h, n, 0), n);
            assert_eq!(choose_k(&KStrategy::EntropyScaled, 1e-9, n, 0), 1);
            assert_eq!(choose_k(&KStrategy::EntropyScaled, 0.0, n, 0), 1);
        }
    }

    #[test]
    fn k_strategy_validation() {
        assert!(KStrategy::Constant { k: 3 }.validate(2).is_err());
        assert!(KStrategy::Constant { k: 0 }.validate(2).is_err());
        assert!(KStrategy::LinearDecreasing { k_start: 1, k_end: 2, total_steps: 10 }
            .validate(4)
            .is_err());
        assert!(KStrategy::LinearDecreasing { k_start: 4, k_end: 1, total_steps: 10 }
            .validate(4)
            .is_ok());
    }

    #[test]
    fn batch_gradient_edge_cases() {
        assert!(matches!(batch_gradient(&[]), Err(Error::Usage(_))));
        assert_eq!(batch_gradient(&[vec![1.0, -2.0]]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(
            batch_gradient(&[vec![1.5, -2.0], vec![-1.5, 2.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(batch_gradient(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
