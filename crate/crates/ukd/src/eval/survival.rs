//! Discrete-time survival: quartile binning of survival times, the
//! discrete-hazard negative log-likelihood, and Harrell's concordance index.

use crate::error::{Result, UkdError};
use crate::tensor::{Graph, Var};

/// Survival times are discretized into this many bins.
pub const N_BINS: usize = 4;

/// Clamp inside the NLL logarithms.
const NLL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalRecord {
    /// Follow-up time in months; positive.
    pub time: f64,
    /// True when death was observed, false when censored.
    pub event: bool,
    /// Discrete time bin, assigned by [`bin_survival_times`] (train) or
    /// [`assign_bin`] (held-out records against fitted edges).
    pub bin: usize,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(UkdError::Parameter(format!("survival time must be positive, got {time}")));
        }
        Ok(Self { time, event, bin: 0 })
    }
}

/// Fitted quartile bin boundaries.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BinSpec {
    /// Upper boundary (inclusive) of bins 0..3; a time above `edges[2]`
    /// falls in the last bin.
    pub edges: [f64; 3],
    /// Records per bin among the times the spec was fitted on.
    pub counts: [usize; N_BINS],
    /// True when every fitted time was equal, which collapses all records
    /// into bin 0 and makes the edges meaningless.
    pub degenerate: bool,
}

/// Sort times and cut the sorted order into four equal parts. Returns the
/// fitted spec plus a bin per input record (in input order). Ties are
/// resolved by stable sort order, so bin sizes always differ by at most 1.
pub fn bin_survival_times(times: &[f64]) -> Result<(BinSpec, Vec<usize>)> {
    if times.len() < N_BINS {
        return Err(UkdError::Config(format!(
            "quartile binning needs at least {N_BINS} records, got {}",
            times.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(UkdError::Parameter(format!("survival time must be positive, got {t}")));
    }
    let n = times.len();
    if times.iter().all(|&t| t == times[0]) {
        let mut counts = [0; N_BINS];
        counts[0] = n;
        return Ok((
            BinSpec { edges: [times[0]; 3], counts, degenerate: true },
            vec![0; n],
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).expect("finite times"));
    let mut bins = vec![0usize; n];
    let mut counts = [0usize; N_BINS];
    let mut edges = [0.0; 3];
    for (r, &idx) in order.iter().enumerate() {
        let b = r * N_BINS / n;
        bins[idx] = b;
        counts[b] += 1;
        if b < 3 {
            edges[b] = times[idx];
        }
    }
    Ok((BinSpec { edges, counts, degenerate: false }, bins))
}

/// Bin for a held-out time under fitted edges: the first bin whose upper
/// edge is not exceeded. Boundary ties go to the lower bin.
pub fn assign_bin(spec: &BinSpec, time: f64) -> usize {
    spec.edges.partition_point(|&e| e < time)
}

/// Direct scalar form of the discrete-hazard NLL for one record, with
/// hazards h = logistic(logits): an event in bin t costs
/// -log S(t-1) - log h_t, a censored record costs -log S(t), where
/// S(t) is the product of (1 - h_j) for j <= t and S(-1) = 1.
pub fn nll_surv_loss(logits: &[f64], bin: usize, event: bool) -> Result<f64> {
    if logits.len() != N_BINS {
        return Err(UkdError::Dimension(format!("{} hazard logits, expected {N_BINS}", logits.len())));
    }
    if bin >= N_BINS {
        return Err(UkdError::Parameter(format!("bin {bin} out of range")));
    }
    let h: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
    let mut loss = 0.0;
    let survive_through = if event { bin } else { bin + 1 };
    for &hj in &h[..survive_through] {
        loss -= (1.0 - hj).max(NLL_EPS).ln();
    }
    if event {
        loss -= h[bin].max(NLL_EPS).ln();
    }
    Ok(loss)
}

/// Tape version of the NLL, averaged over a batch: `logits` is [batch, 4]
/// and `bins`/`events` give each record's label. The per-record terms are
/// selected by constant 0/1 masks so the whole loss stays differentiable.
pub fn nll_surv_graph(
    g: &mut Graph,
    logits: Var,
    bins: &[usize],
    events: &[bool],
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != N_BINS {
        return Err(UkdError::Dimension(format!("hazard logits must be [batch, {N_BINS}], got {shape:?}")));
    }
    let batch = shape[0];
    if bins.len() != batch || events.len() != batch {
        return Err(UkdError::Dimension(format!(
            "{} bins / {} events for batch {batch}",
            bins.len(),
            events.len()
        )));
    }
    if let Some(b) = bins.iter().find(|&&b| b >= N_BINS) {
        return Err(UkdError::Parameter(format!("bin {b} out of range")));
    }
    let mut survive_mask = vec![0.0; batch * N_BINS];
    let mut hazard_mask = vec![0.0; batch * N_BINS];
    for i in 0..batch {
        let through = if events[i] { bins[i] } else { bins[i] + 1 };
        for j in 0..through {
            survive_mask[i * N_BINS + j] = 1.0;
        }
        if events[i] {
            hazard_mask[i * N_BINS + bins[i]] = 1.0;
        }
    }
    let h = g.sigmoid(logits);
    let ones = g.constant(&shape, vec![1.0; batch * N_BINS]);
    let neg_h = g.neg(h);
    let one_minus_h = g.add(ones, neg_h)?;
    let surv_clamped = g.clamp_min(one_minus_h, NLL_EPS);
    let log_surv = g.log(surv_clamped);
    let h_clamped = g.clamp_min(h, NLL_EPS);
    let log_h = g.log(h_clamped);
    let sm = g.constant(&shape, survive_mask);
    let hm = g.constant(&shape, hazard_mask);
    let surv_terms = g.mul(sm, log_surv)?;
    let hazard_terms = g.mul(hm, log_h)?;
    let all = g.add(surv_terms, hazard_terms)?;
    let total = g.sum_all(all);
    Ok(g.scale(total, -1.0 / batch as f64))
}

/// Harrell's concordance index. A pair (i, j) is comparable when i has an
/// observed event and either dies strictly earlier or ties j's time while
/// j is censored. Concordant pairs (higher risk for i) count 1, tied risks
/// count 0.5.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(UkdError::Dimension(format!(
            "{} risks for {} records",
            risks.len(),
            records.len()
        )));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(UkdError::Parameter("risks must be finite".into()));
    }
    let mut comparable = 0u64;
    let mut concordant = 0.0;
    for (i, a) in records.iter().enumerate() {
        if !a.event {
            continue;
        }
        for (j, b) in records.iter().enumerate() {
            if i == j {
                continue;
            }
            let ok = a.time < b.time || (a.time == b.time && !b.event);
            if !ok {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                concordant += 1.0;
            } else if risks[i] == risks[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(UkdError::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(concordant / comparable as f64)
}
