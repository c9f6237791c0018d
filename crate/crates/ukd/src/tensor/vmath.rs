//! Plain-value math used on detached (teacher-side) paths, where quantities
//! are targets and must never join the gradient graph.

/// Row-wise `softmax((x - center) / temp)` over rows of width `k`.
/// `center` may be empty for no centering.
pub fn centered_softmax_rows(x: &[f64], k: usize, center: &[f64], temp: f64) -> Vec<f64> {
    assert!(temp > 0.0, "temperature must be positive");
    assert!(center.is_empty() || center.len() == k);
    let rows = x.len() / k;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let c = if center.is_empty() { 0.0 } else { center[j] };
            max = max.max((row[j] - c) / temp);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let c = if center.is_empty() { 0.0 } else { center[j] };
            let e = ((row[j] - c) / temp - max).exp();
            out[r * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            out[r * k + j] /= sum;
        }
    }
    out
}

/// Normalize each row of width `d` to unit L2 norm, flooring norms at `eps`.
pub fn l2_normalize_rows(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for j in 0..d {
            out[r * d + j] = row[j] / norm;
        }
    }
    out
}

/// Cosine similarity between two vectors.
///
/// Computed as `1 - ||a_hat - b_hat||^2 / 2` on the unit-normalized vectors,
/// which is algebraically identical to the dot-product form but returns
/// exactly 1 for bitwise-identical inputs. Result is clamped to `[-1, 1]`.
/// Vectors with norm at or below 1e-12 are rejected as degenerate.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> crate::error::Result<f64> {
    use crate::error::UkdError;
    if a.len() != b.len() {
        return Err(UkdError::Dimension(format!(
            "cosine_similarity: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(UkdError::Degenerate("cosine_similarity: empty vectors".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(UkdError::Degenerate(format!(
            "cosine_similarity: near-zero norm ({na:e}, {nb:e})"
        )));
    }
    let mut dist2 = 0.0;
    for i in 0..a.len() {
        let d = a[i] / na - b[i] / nb;
        dist2 += d * d;
    }
    Ok((1.0 - 0.5 * dist2).clamp(-1.0, 1.0))
}

/// Shannon entropy (nats) of one probability row.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Mean of each column of an `[n, k]` row-major matrix.
pub fn column_means(x: &[f64], k: usize) -> Vec<f64> {
    let rows = x.len() / k;
    assert!(rows > 0, "column_means of empty matrix");
    let mut out = vec![0.0; k];
    for r in 0..rows {
        for j in 0..k {
            out[j] += x[r * k + j];
        }
    }
    for v in &mut out {
        *v /= rows as f64;
    }
    out
}
