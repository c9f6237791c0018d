//! Label-stratified dataset splits with largest-remainder allocation, plus
//! the survival variant that stratifies jointly on (time bin, event) so
//! censorship stays balanced across splits.

use std::collections::BTreeMap;

use crate::error::{Result, UkdError};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct StratifiedSplit {
    /// One index list per ratio, in ratio order (train first by convention).
    pub parts: Vec<Vec<usize>>,
    /// Classes too small to stratify fall back to the first part; each such
    /// fallback is reported here for the caller to surface.
    pub warnings: Vec<String>,
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(UkdError::Config("need at least one split ratio".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(UkdError::Config(format!("ratios must lie in [0, 1], got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(UkdError::Config(format!("ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Allocate `n` items to splits proportionally: floor shares first, then
/// the leftover items go to the splits with the largest fractional parts
/// (index order breaks fraction ties).
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(ratios.len());
    let mut assigned = 0usize;
    for (s, &r) in ratios.iter().enumerate() {
        let exact = r * n as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        assigned += base;
        fracs.push((exact - base as f64, s));
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, s) in fracs.iter().take(n - assigned) {
        counts[s] += 1;
    }
    counts
}

fn split_by_key(keys: &[u64], ratios: &[f64], seed: u64) -> Result<StratifiedSplit> {
    check_ratios(ratios)?;
    if keys.is_empty() {
        return Err(UkdError::Config("nothing to split".into()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let root = Rng::new(seed);
    let mut parts = vec![Vec::new(); ratios.len()];
    let mut warnings = Vec::new();
    for (key, mut members) in groups {
        if members.len() < ratios.len() {
            warnings.push(format!(
                "class {key} has {} members for {} splits; keeping all in the first split",
                members.len(),
                ratios.len()
            ));
            parts[0].extend(members);
            continue;
        }
        // Per-class substream: adding or removing one class never
        // reshuffles the others.
        let mut rng = root.substream(key);
        rng.shuffle(&mut members);
        let counts = largest_remainder(members.len(), ratios);
        let mut cursor = 0;
        for (s, &c) in counts.iter().enumerate() {
            parts[s].extend(&members[cursor..cursor + c]);
            cursor += c;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(StratifiedSplit { parts, warnings })
}

/// Split indices so every class appears in each part in proportion to the
/// ratios (within one item). Classes with fewer members than there are
/// splits go entirely to the first part, with a warning.
pub fn stratified_split(labels: &[usize], ratios: &[f64], seed: u64) -> Result<StratifiedSplit> {
    let keys: Vec<u64> = labels.iter().map(|&l| l as u64).collect();
    split_by_key(&keys, ratios, seed)
}

/// Survival variant: stratify jointly on (time bin, event flag) so both
/// the time distribution and the censorship rate carry over to each part.
pub fn stratified_split_survival(
    bins: &[usize],
    events: &[bool],
    ratios: &[f64],
    seed: u64,
) -> Result<StratifiedSplit> {
    if bins.len() != events.len() {
        return Err(UkdError::Dimension(format!(
            "{} bins for {} event flags",
            bins.len(),
            events.len()
        )));
    }
    let keys: Vec<u64> = bins.iter().zip(events).map(|(&b, &e)| b as u64 * 2 + e as u64).collect();
    split_by_key(&keys, ratios, seed)
}
