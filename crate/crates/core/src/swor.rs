//! Sampling actions without replacement and their inclusion probabilities.
//!
//! Samples are drawn with the Gumbel-top-k trick: perturb each log-probability
//! with independent Gumbel noise and keep the `k` largest keys. The resulting
//! ordered sample has the same law as `k` successive draws from the
//! renormalized remaining distribution.
//!
//! The inclusion probability `Ω(a)` of an action is the probability that it
//! appears anywhere among those `k` draws. For small action sets it is
//! computed exactly by a dynamic program over drawn subsets; above the cap it
//! is estimated by repeated sampling.

use rand::Rng;

use crate::error::{Error, Result};

/// Probabilities at or below this value are treated as outside the support.
pub const SUPPORT_EPSILON: f64 = 1e-12;

/// Largest action count handled by exact inclusion probabilities.
pub const DEFAULT_EXACT_CAP: usize = 12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    probabilities: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Precondition("distribution over zero actions".into()));
        }
        if let Some(p) = probabilities.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Precondition(format!("invalid probability {p}")));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Precondition(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probabilities })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probabilities: vec![1.0 / n as f64; n],
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn num_actions(&self) -> usize {
        self.probabilities.len()
    }

    pub fn in_support(&self, action: usize) -> bool {
        self.probabilities.get(action).is_some_and(|&p| p > SUPPORT_EPSILON)
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.num_actions()).filter(|&a| self.in_support(a)).collect()
    }

    pub fn support_size(&self) -> usize {
        self.probabilities.iter().filter(|&&p| p > SUPPORT_EPSILON).count()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// One categorical draw by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (a, &p) in self.probabilities.iter().enumerate() {
            if p <= SUPPORT_EPSILON {
                continue;
            }
            acc += p;
            last = a;
            if u < acc {
                return a;
            }
        }
        last
    }
}

/// `k` distinct actions in draw order with their inclusion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SworSample {
    pub actions: Vec<usize>,
    pub inclusion_probabilities: Vec<f64>,
}

impl SworSample {
    pub fn k(&self) -> usize {
        self.actions.len()
    }

    /// A one-action sample; for `k = 1` the inclusion probability is the
    /// action's own probability.
    pub fn single(action: usize, probability: f64) -> Self {
        Self {
            actions: vec![action],
            inclusion_probabilities: vec![probability],
        }
    }

    /// Every action with inclusion probability 1.
    pub fn exhaustive(num_actions: usize) -> Self {
        Self {
            actions: (0..num_actions).collect(),
            inclusion_probabilities: vec![1.0; num_actions],
        }
    }
}

/// How inclusion probabilities are obtained for a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InclusionMode {
    /// Action counts up to this use the exact dynamic program.
    pub exact_cap: usize,
    /// Resample count for the Monte Carlo fallback.
    pub mc_samples: usize,
}

impl Default for InclusionMode {
    fn default() -> Self {
        Self {
            exact_cap: DEFAULT_EXACT_CAP,
            mc_samples: 10_000,
        }
    }
}

fn check_k(dist: &CategoricalDistribution, k: usize) -> Result<()> {
    if k == 0 || k > dist.num_actions() {
        return Err(Error::Sampling(format!(
            "k = {k} outside [1, {}]",
            dist.num_actions()
        )));
    }
    let support = dist.support_size();
    if k > support {
        return Err(Error::Sampling(format!(
            "k = {k} exceeds the {support} actions with nonzero probability"
        )));
    }
    Ok(())
}

/// Standard Gumbel draw `-ln(-ln U)` with `U` in the open unit interval.
fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Gumbel-top-k: the first `k` actions of a without-replacement draw order.
/// Ties are broken by the lower action index.
pub fn gumbel_top_k<R: Rng + ?Sized>(
    dist: &CategoricalDistribution,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_k(dist, k)?;
    let mut keys: Vec<(f64, usize)> = dist
        .probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > SUPPORT_EPSILON)
        .map(|(a, &p)| (p.ln() + gumbel(rng), a))
        .collect();
    keys.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    Ok(keys.into_iter().take(k).map(|(_, a)| a).collect())
}

/// `k` successive categorical draws, each from the renormalized remainder.
pub fn sample_sequential<R: Rng + ?Sized>(
    dist: &CategoricalDistribution,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_k(dist, k)?;
    let mut remaining: Vec<f64> = dist
        .probabilities
        .iter()
        .map(|&p| if p > SUPPORT_EPSILON { p } else { 0.0 })
        .collect();
    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k {
        let mass: f64 = remaining.iter().sum();
        let u = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = None;
        for (a, &p) in remaining.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            acc += p;
            pick = Some(a);
            if u < acc {
                break;
            }
        }
        let a = pick.expect("k never exceeds the support size");
        remaining[a] = 0.0;
        drawn.push(a);
    }
    Ok(drawn)
}

/// Draws `k` distinct actions and attaches their inclusion probabilities,
/// exact up to [`DEFAULT_EXACT_CAP`] actions and Monte Carlo above.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    dist: &CategoricalDistribution,
    k: usize,
    rng: &mut R,
) -> Result<SworSample> {
    sample_without_replacement_with(dist, k, InclusionMode::default(), rng)
}

pub fn sample_without_replacement_with<R: Rng + ?Sized>(
    dist: &CategoricalDistribution,
    k: usize,
    mode: InclusionMode,
    rng: &mut R,
) -> Result<SworSample> {
    let actions = gumbel_top_k(dist, k, rng)?;
    let table = if dist.num_actions() <= mode.exact_cap {
        inclusion_probabilities_exact(dist, k)?
    } else {
        inclusion_probability_mc(dist, k, mode.mc_samples, rng)?
    };
    let inclusion_probabilities = actions.iter().map(|&a| table[a]).collect();
    Ok(SworSample {
        actions,
        inclusion_probabilities,
    })
}

/// Exact inclusion probabilities for every action (zero outside the support).
pub fn inclusion_probabilities_exact(dist: &CategoricalDistribution, k: usize) -> Result<Vec<f64>> {
    inclusion_probabilities_exact_capped(dist, k, DEFAULT_EXACT_CAP)
}

pub fn inclusion_probabilities_exact_capped(
    dist: &CategoricalDistribution,
    k: usize,
    cap: usize,
) -> Result<Vec<f64>> {
    let n = dist.num_actions();
    if n > cap {
        return Err(Error::Precondition(format!(
            "{n} actions exceed the exact inclusion cap of {cap}; use the Monte Carlo estimate"
        )));
    }
    check_k(dist, k)?;
    let support = dist.support();
    let m = support.len();
    let mut omega = vec![0.0; n];

    if k == m {
        support.iter().for_each(|&a| omega[a] = 1.0);
        return Ok(omega);
    }
    if k == 1 {
        support.iter().for_each(|&a| omega[a] = dist.probabilities[a]);
        return Ok(omega);
    }
    let p: Vec<f64> = support.iter().map(|&a| dist.probabilities[a]).collect();
    if p.iter().all(|&q| q == p[0]) {
        support.iter().for_each(|&a| omega[a] = k as f64 / m as f64);
        return Ok(omega);
    }

    // reach[mask]: probability that the first |mask| draws are exactly `mask`.
    let full = 1usize << m;
    let mut reach = vec![0.0; full];
    reach[0] = 1.0;
    let mut masks: Vec<usize> = (0..full).filter(|s| (s.count_ones() as usize) < k).collect();
    masks.sort_by_key(|s| s.count_ones());
    for mask in masks {
        let here = reach[mask];
        if here == 0.0 {
            continue;
        }
        let remaining: f64 = (0..m).filter(|j| mask & (1 << j) == 0).map(|j| p[j]).sum();
        for j in 0..m {
            if mask & (1 << j) == 0 {
                reach[mask | (1 << j)] += here * p[j] / remaining;
            }
        }
    }
    for mask in (0..full).filter(|s| s.count_ones() as usize == k) {
        for j in 0..m {
            if mask & (1 << j) != 0 {
                omega[support[j]] += reach[mask];
            }
        }
    }
    Ok(omega)
}

/// Exact `Ω(action)` for one action; the action must have nonzero probability.
pub fn inclusion_probability_exact(
    dist: &CategoricalDistribution,
    k: usize,
    action: usize,
) -> Result<f64> {
    if !dist.in_support(action) {
        return Err(Error::Precondition(format!(
            "action {action} has zero probability"
        )));
    }
    Ok(inclusion_probabilities_exact(dist, k)?[action])
}

/// Empirical inclusion frequencies over `n_samples` Gumbel-top-k draws.
pub fn inclusion_probability_mc<R: Rng + ?Sized>(
    dist: &CategoricalDistribution,
    k: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be at least 1".into()));
    }
    check_k(dist, k)?;
    let mut counts = vec![0usize; dist.num_actions()];
    for _ in 0..n_samples {
        for a in gumbel_top_k(dist, k, rng)? {
            counts[a] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / n_samples as f64)
        .collect())
}
