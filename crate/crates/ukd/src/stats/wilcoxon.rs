//! Wilcoxon signed-rank test for paired samples: exact enumeration of the
//! sign-flip null for small n, normal approximation with tie and continuity
//! corrections otherwise.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, UkdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// a tends to exceed b.
    Greater,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct WilcoxonResult {
    /// W+: the rank sum of the positive differences.
    pub statistic: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub p_value: f64,
    /// Whether the p-value came from full enumeration (n_used <= 12).
    pub exact: bool,
}

/// Midranks of the absolute differences, ties averaged.
fn rank_abs(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).expect("finite diffs"));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact tail probabilities by enumerating all 2^n sign assignments over
/// the observed midranks: (P(W >= w), P(W <= w)).
fn exact_tails(ranks: &[f64], w: f64) -> (f64, f64) {
    let n = ranks.len();
    let total = 1u64 << n;
    let mut ge = 0u64;
    let mut le = 0u64;
    // Tolerance guards the half-integer sums accumulated in different orders.
    let eps = 1e-9;
    for mask in 0..total {
        let mut sum = 0.0;
        for (i, &r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                sum += r;
            }
        }
        if sum >= w - eps {
            ge += 1;
        }
        if sum <= w + eps {
            le += 1;
        }
    }
    (ge as f64 / total as f64, le as f64 / total as f64)
}

/// The signed-rank test on paired samples. Zero differences are dropped
/// first; with twelve or fewer informative pairs the null distribution is
/// enumerated exactly, otherwise a tie-corrected normal approximation with
/// continuity correction is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alt: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(UkdError::Dimension(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(UkdError::UndefinedTest("no pairs".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(UkdError::Parameter("differences must be finite".into()));
    }
    if diffs.is_empty() {
        return Err(UkdError::UndefinedTest("all paired differences are zero".into()));
    }
    let n = diffs.len();
    let ranks = rank_abs(&diffs);
    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, &r)| r).sum();

    if n <= 12 {
        let (p_ge, p_le) = exact_tails(&ranks, w_plus);
        let p = match alt {
            Alternative::Greater => p_ge,
            Alternative::TwoSided => (2.0 * p_ge.min(p_le)).min(1.0),
        };
        return Ok(WilcoxonResult { statistic: w_plus, n_used: n, p_value: p, exact: true });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // Tie correction: group the midranks by value; each group of size t
    // removes (t^3 - t)/48 from the null variance.
    let mut sorted = ranks.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(UkdError::UndefinedTest("null variance vanished under ties".into()));
    }
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let upper = |x: f64| 1.0 - normal.cdf(x);
    let p = match alt {
        Alternative::Greater => upper((w_plus - mean - 0.5) / sd),
        Alternative::TwoSided => (2.0 * upper(((w_plus - mean).abs() - 0.5) / sd)).min(1.0),
    };
    Ok(WilcoxonResult { statistic: w_plus, n_used: n, p_value: p, exact: false })
}
