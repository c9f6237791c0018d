//! Nearest-neighbor retrieval over normalized features: per-feature
//! statistics come from the training set only, neighbors are ranked by
//! Euclidean distance with ascending-id tie breaks.

use crate::error::{Result, UkdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Per-feature standardization by train mean and standard deviation.
    ZScore,
    /// Per-feature rescaling of the train range onto [0, 1]; kept as an
    /// alternative mode for comparison runs.
    MinMax,
}

/// Guard for constant feature components: a spread below this keeps a
/// divisor of 1 instead.
const SPREAD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    norm: Normalization,
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// Normalized train rows, `[n, dim]`.
    rows: Vec<f64>,
    labels: Vec<usize>,
}

impl RetrievalIndex {
    /// Fit normalization statistics on the train matrix and store its
    /// normalized rows. Row order defines retrieval ids.
    pub fn build(
        features: &[f64],
        labels: &[usize],
        dim: usize,
        norm: Normalization,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(UkdError::Parameter("feature dim must be positive".into()));
        }
        if labels.is_empty() {
            return Err(UkdError::Config("cannot build an index from an empty training set".into()));
        }
        let n = labels.len();
        if features.len() != n * dim {
            return Err(UkdError::Dimension(format!(
                "{} feature values for {n} labels of dim {dim}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(UkdError::Parameter("features must be finite".into()));
        }
        let mut shift = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        match norm {
            Normalization::ZScore => {
                for d in 0..dim {
                    let mean = (0..n).map(|i| features[i * dim + d]).sum::<f64>() / n as f64;
                    let var = (0..n)
                        .map(|i| {
                            let c = features[i * dim + d] - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / n as f64;
                    shift[d] = mean;
                    let sd = var.sqrt();
                    scale[d] = if sd < SPREAD_FLOOR { 1.0 } else { sd };
                }
            }
            Normalization::MinMax => {
                for d in 0..dim {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for i in 0..n {
                        lo = lo.min(features[i * dim + d]);
                        hi = hi.max(features[i * dim + d]);
                    }
                    shift[d] = lo;
                    let span = hi - lo;
                    scale[d] = if span < SPREAD_FLOOR { 1.0 } else { span };
                }
            }
        }
        let mut rows = vec![0.0; n * dim];
        for i in 0..n {
            for d in 0..dim {
                rows[i * dim + d] = (features[i * dim + d] - shift[d]) / scale[d];
            }
        }
        Ok(Self { dim, norm, shift, scale, rows, labels: labels.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    /// Ranked `(id, distance)` of the `k` nearest stored rows to `query`,
    /// after normalizing the query with the fitted train statistics.
    /// Distance ties break toward the smaller id; `k` is capped at the
    /// index size.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(UkdError::Parameter("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(UkdError::Dimension(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.dim
            )));
        }
        let q: Vec<f64> = query
            .iter()
            .enumerate()
            .map(|(d, v)| (v - self.shift[d]) / self.scale[d])
            .collect();
        let mut scored: Vec<(usize, f64)> = self
            .rows
            .chunks(self.dim)
            .enumerate()
            .map(|(id, row)| {
                let sq: f64 = row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (id, sq.sqrt())
            })
            .collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances").then(a.0.cmp(&b.0)));
        scored.truncate(k.min(self.labels.len()));
        Ok(scored)
    }
}

/// Top-k retrieval accuracy: the fraction of queries whose k nearest
/// neighbors include at least one row of the query's class. Returned in
/// the order of `ks`.
pub fn acc_at_k(
    index: &RetrievalIndex,
    queries: &[f64],
    query_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if query_labels.is_empty() {
        return Err(UkdError::Degenerate("no queries".into()));
    }
    if queries.len() != query_labels.len() * index.dim() {
        return Err(UkdError::Dimension(format!(
            "{} query values for {} labels of dim {}",
            queries.len(),
            query_labels.len(),
            index.dim()
        )));
    }
    let k_max = *ks.iter().max().ok_or_else(|| UkdError::Parameter("no k values".into()))?;
    let mut hits = vec![0usize; ks.len()];
    for (qi, label) in query_labels.iter().enumerate() {
        let ranked = index.retrieve(&queries[qi * index.dim()..(qi + 1) * index.dim()], k_max)?;
        for (slot, &k) in ks.iter().enumerate() {
            if ranked.iter().take(k).any(|&(id, _)| index.label(id) == *label) {
                hits[slot] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / query_labels.len() as f64).collect())
}
