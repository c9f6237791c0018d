//! Nonparametric bootstrap confidence intervals. Each replicate resamples
//! record indices with replacement from its own counter-based substream, so
//! results are bit-identical across runs and across thread counts.

use rayon::prelude::*;

use crate::error::{Result, UkdError};
use crate::rng::Rng;

/// A replicate whose metric stays undefined after this many fresh draws is
/// hopeless; the dataset is reported as degenerate.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub name: String,
    /// The metric on the full, unresampled dataset.
    pub point_estimate: f64,
    /// 2.5th percentile of the replicate values.
    pub ci_low: f64,
    /// 97.5th percentile of the replicate values.
    pub ci_high: f64,
    pub bootstrap_mean: f64,
    pub bootstrap_std: f64,
    pub replicates: usize,
    /// Resamples that were discarded and redrawn because the metric was
    /// undefined on them (for example a resample missing a class).
    pub redraws: usize,
}

/// Linear-interpolation percentile of an ascending slice, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// One replicate: draw n indices with replacement, retrying on an undefined
/// metric with a fresh substream each attempt. Returns (value, redraws).
fn run_replicate<F>(
    metric: &F,
    n: usize,
    root: &Rng,
    replicates: usize,
    r: usize,
) -> Result<(f64, usize)>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let mut indices = vec![0usize; n];
    for attempt in 0..MAX_ATTEMPTS {
        let tag = attempt * replicates as u64 + r as u64;
        let mut rng = root.substream(tag);
        for slot in indices.iter_mut() {
            *slot = rng.below_usize(n);
        }
        match metric(&indices) {
            Ok(v) if v.is_finite() => return Ok((v, attempt as usize)),
            Ok(v) => {
                return Err(UkdError::Degenerate(format!("metric produced non-finite value {v}")))
            }
            Err(UkdError::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(UkdError::DegenerateDataset(format!(
        "replicate {r} stayed undefined after {MAX_ATTEMPTS} draws"
    )))
}

/// Percentile bootstrap of `metric` over a dataset of `n` records. The
/// metric sees a multiset of record indices and may return an undefined
/// metric error, in which case that resample is redrawn; a dataset needing
/// more redraws than replicates overall is rejected as degenerate.
pub fn bootstrap<F>(
    name: &str,
    n: usize,
    metric: F,
    replicates: usize,
    seed: u64,
) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(UkdError::Parameter("cannot bootstrap an empty dataset".into()));
    }
    if replicates == 0 {
        return Err(UkdError::Parameter("need at least one bootstrap replicate".into()));
    }
    let full: Vec<usize> = (0..n).collect();
    let point_estimate = metric(&full)?;
    if !point_estimate.is_finite() {
        return Err(UkdError::Degenerate("point estimate is not finite".into()));
    }

    let root = Rng::new(seed);
    let outcomes: Vec<(f64, usize)> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(&metric, n, &root, replicates, r))
        .collect::<Result<_>>()?;

    let redraws: usize = outcomes.iter().map(|(_, a)| a).sum();
    if redraws > replicates {
        return Err(UkdError::DegenerateDataset(format!(
            "{redraws} redraws over {replicates} replicates; metric is undefined too often"
        )));
    }

    let values: Vec<f64> = outcomes.iter().map(|(v, _)| *v).collect();
    // Reductions run serially in replicate order so thread count never
    // changes the floating-point result.
    let mean = values.iter().sum::<f64>() / replicates as f64;
    let std = if replicates > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (replicates - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(MetricReport {
        name: name.to_owned(),
        point_estimate,
        ci_low: percentile(&sorted, 0.025),
        ci_high: percentile(&sorted, 0.975),
        bootstrap_mean: mean,
        bootstrap_std: std,
        replicates,
        redraws,
    })
}
