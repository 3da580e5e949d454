use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TctError};
use crate::exec::Execution;
use crate::rng::{self, Domain};
use crate::search::{generate_scanpath, AttentionMap, Rect, ScanpathResult, SearchParams};

/// Cumulative search performance of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trials: usize,
    pub found: usize,
    pub not_found: usize,
    /// `curve[n-1]` is the fraction of trials found within `n` fixations.
    pub curve: Vec<f64>,
    /// Mean fixation count over every found trial.
    pub avg_fixations: Option<f64>,
    /// Mean fixation count over trials found within `n_max` fixations.
    pub avg_fixations_within_n_max: Option<f64>,
}

impl MetricsReport {
    pub fn n_max(&self) -> usize {
        self.curve.len()
    }

    /// `p(n)`, with `p(0) = 0` and `p(n) = p(n_max)` beyond the curve.
    pub fn p(&self, n: usize) -> f64 {
        match n {
            0 => 0.0,
            n => self.curve[n.min(self.curve.len()) - 1],
        }
    }
}

fn mean(sum: usize, count: usize) -> Option<f64> {
    (count > 0).then(|| sum as f64 / count as f64)
}

/// Aggregates scanpaths into `p(1..=n_max)` and average fixation counts.
pub fn compute_metrics(results: &[ScanpathResult], n_max: usize) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(TctError::input("cannot compute metrics over zero trials"));
    }
    if n_max == 0 {
        return Err(TctError::input("n_max must be at least 1"));
    }
    let mut hist = vec![0usize; n_max + 1];
    let (mut found, mut sum_all, mut within, mut sum_within) = (0, 0, 0, 0);
    for r in results.iter().filter(|r| r.found) {
        found += 1;
        sum_all += r.n_fixations;
        if r.n_fixations <= n_max {
            hist[r.n_fixations] += 1;
            within += 1;
            sum_within += r.n_fixations;
        }
    }
    let trials = results.len();
    let mut curve = Vec::with_capacity(n_max);
    let mut cumulative = 0;
    for count in &hist[1..] {
        cumulative += count;
        curve.push(cumulative as f64 / trials as f64);
    }
    Ok(MetricsReport {
        trials,
        found,
        not_found: trials - found,
        curve,
        avg_fixations: mean(sum_all, found),
        avg_fixations_within_n_max: mean(sum_within, within),
    })
}

/// Rebuilds the within-`n_max` statistics from a curve and its trial count.
/// Returns `(found within n_max, average fixations within n_max)`.
pub fn reaggregate_curve(curve: &[f64], trials: usize) -> (usize, Option<f64>) {
    let mut previous = 0;
    let (mut count, mut sum) = (0, 0);
    for (i, p) in curve.iter().enumerate() {
        let cumulative = (p * trials as f64).round() as usize;
        let at_n = cumulative.saturating_sub(previous);
        count += at_n;
        sum += at_n * (i + 1);
        previous = cumulative;
    }
    (count, mean(sum, count))
}

/// Uniform random map of the given size.
pub fn uniform_map(rng: &mut impl Rng, height: usize, width: usize) -> AttentionMap {
    let values = (0..height * width).map(|_| rng.gen::<f64>()).collect();
    AttentionMap::new(height, width, values).expect("uniform draws are valid")
}

/// Search on `n_repeats` independent uniform random maps. Repeat `r` draws
/// from the stream `(seed, random-baseline, (stream_index << 32) | r)`.
pub fn random_baseline_scanpaths(
    image: (usize, usize),
    target_box: &Rect,
    params: &SearchParams,
    n_repeats: usize,
    seed: u64,
    stream_index: u64,
    exec: Execution,
) -> Result<Vec<ScanpathResult>> {
    if n_repeats == 0 {
        return Err(TctError::input("random baseline needs at least one repeat"));
    }
    let (h, w) = image;
    let repeats: Vec<u64> = (0..n_repeats as u64).collect();
    exec.try_map(&repeats, |_, &r| {
        let mut rng = rng::stream(seed, Domain::RandomBaseline, (stream_index << 32) | r);
        generate_scanpath(&uniform_map(&mut rng, h, w), target_box, params)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn random_baseline(
    image: (usize, usize),
    target_box: &Rect,
    params: &SearchParams,
    n_repeats: usize,
    seed: u64,
    n_max: usize,
    exec: Execution,
) -> Result<MetricsReport> {
    let results = random_baseline_scanpaths(image, target_box, params, n_repeats, seed, 0, exec)?;
    compute_metrics(&results, n_max)
}
