//! Small summary statistics over learning curves.

pub const TRAILING_WINDOW: usize = 20;
/// Cart-pole is considered solved once the trailing mean reaches this.
pub const SOLVED_RETURN: f64 = 195.0;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); zero for a single value.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return if xs.is_empty() { f64::NAN } else { 0.0 };
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean of the last `window` values at every position; the first entries
/// average over what is available.
pub fn trailing_means(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..xs.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            mean(&xs[start..=i])
        })
        .collect()
}

/// First 1-based episode whose full trailing window averages at least `threshold`.
pub fn episodes_to_threshold(returns: &[f64], window: usize, threshold: f64) -> Option<usize> {
    let means = trailing_means(returns, window);
    (window.max(1) - 1..returns.len())
        .find(|&i| means[i] >= threshold)
        .map(|i| i + 1)
}

/// Median of episodes-to-threshold where a run that never reached it counts
/// as `budget + 1`.
pub fn median_episodes_to_threshold(hits: &[Option<usize>], budget: usize) -> f64 {
    let v: Vec<f64> = hits.iter().map(|h| h.unwrap_or(budget + 1) as f64).collect();
    median(&v)
}
