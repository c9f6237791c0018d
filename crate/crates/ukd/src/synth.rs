//! Deterministic synthetic dataset generators.
//!
//! Each generator is a pure function of its parameters and seed, so the
//! same call always reproduces the same dataset down to the last bit.
//! They are desk-scale stand-ins: small enough to train against in tests
//! while still carrying a recoverable signal.

use crate::backbone::ImageBatch;
use crate::error::{Result, UkdError};
use crate::eval::FeatureBag;
use crate::rng::Rng;

pub const TEXTURE_CLASSES: usize = 3;

// Distinct substream tags so generators sharing one seed stay decorrelated.
const TAG_TEXTURES: u64 = 1;
const TAG_MIL: u64 = 2;
const TAG_SURVIVAL: u64 = 3;
const TAG_CLUSTERS: u64 = 4;

/// Texture images with a latent class per image.
#[derive(Debug, Clone)]
pub struct TextureDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

/// Images in three stationary texture families: horizontal stripes,
/// vertical stripes, and a checkerboard, each with a random integer
/// frequency in 2..=4, random phase, per-channel gain, and additive noise.
pub fn pretrain_textures(count: usize, size: usize, seed: u64) -> Result<TextureDataset> {
    if count == 0 || size == 0 {
        return Err(UkdError::Parameter(format!(
            "texture dataset needs positive count and size, got {count}x{size}"
        )));
    }
    let channels = 3;
    let mut rng = Rng::new(seed).substream(TAG_TEXTURES);
    let mut data = Vec::with_capacity(count * channels * size * size);
    let mut labels = Vec::with_capacity(count);
    let tau = std::f64::consts::TAU;
    for _ in 0..count {
        let class = rng.below_usize(TEXTURE_CLASSES);
        let freq = (2 + rng.below_usize(3)) as f64;
        let phase_a = rng.uniform() * tau;
        let phase_b = rng.uniform() * tau;
        let gains: Vec<f64> = (0..channels).map(|_| rng.uniform_in(0.5, 1.0)).collect();
        let mut plane = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let fy = freq * y as f64 / size as f64;
                let fx = freq * x as f64 / size as f64;
                plane[y * size + x] = match class {
                    0 => (tau * fy + phase_a).sin(),
                    1 => (tau * fx + phase_a).sin(),
                    _ => (tau * fy + phase_a).sin() * (tau * fx + phase_b).sin(),
                };
            }
        }
        for gain in gains {
            for &v in &plane {
                data.push((gain * v + 0.1 * rng.normal()).clamp(-2.0, 2.0));
            }
        }
        labels.push(class);
    }
    Ok(TextureDataset {
        images: ImageBatch::new(data, count, channels, size)?,
        labels,
    })
}

/// Instance bags with a planted signal in the positive class.
#[derive(Debug, Clone)]
pub struct MilDataset {
    pub bags: Vec<FeatureBag>,
    pub labels: Vec<usize>,
}

/// Bags of standard-normal instances; each bag is positive with probability
/// `signal_rate`, in which case two of its instances are replaced by a
/// dataset-wide signal vector plus jitter.
pub fn mil_bags(
    count: usize,
    dim: usize,
    min_instances: usize,
    max_instances: usize,
    signal_rate: f64,
    seed: u64,
) -> Result<MilDataset> {
    if count == 0 || dim == 0 {
        return Err(UkdError::Parameter(format!(
            "bag dataset needs positive count and dim, got {count} bags of dim {dim}"
        )));
    }
    if min_instances == 0 || min_instances > max_instances {
        return Err(UkdError::Parameter(format!(
            "bad instance range {min_instances}..={max_instances}"
        )));
    }
    if !(0.0..=1.0).contains(&signal_rate) || !signal_rate.is_finite() {
        return Err(UkdError::Parameter(format!(
            "signal rate must lie in [0, 1], got {signal_rate}"
        )));
    }
    let mut rng = Rng::new(seed).substream(TAG_MIL);
    let signal: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
    let mut bags = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for id in 0..count {
        let n = min_instances + rng.below_usize(max_instances - min_instances + 1);
        let positive = rng.bernoulli(signal_rate);
        let mut rows: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        if positive {
            let planted = 2.min(n);
            let slots = rng.sample_distinct(n, planted);
            for slot in slots {
                for d in 0..dim {
                    rows[slot * dim + d] = signal[d] + 0.3 * rng.normal();
                }
            }
        }
        bags.push(FeatureBag::new(id as u64, dim, rows)?);
        labels.push(usize::from(positive));
    }
    Ok(MilDataset { bags, labels })
}

/// Instance bags with survival outcomes driven by a latent risk score.
#[derive(Debug, Clone)]
pub struct SurvivalDataset {
    pub bags: Vec<FeatureBag>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// Ground-truth risk in [0, 1] behind each bag's outcome, for checks.
    pub latent_risk: Vec<f64>,
}

/// Bags whose instances carry an additive signal proportional to a latent
/// risk; survival time decays exponentially in that risk, with lognormal
/// noise and roughly a quarter of records censored.
pub fn survival_bags(count: usize, dim: usize, seed: u64) -> Result<SurvivalDataset> {
    if count == 0 || dim == 0 {
        return Err(UkdError::Parameter(format!(
            "survival dataset needs positive count and dim, got {count} bags of dim {dim}"
        )));
    }
    let mut rng = Rng::new(seed).substream(TAG_SURVIVAL);
    let signal: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
    let mut bags = Vec::with_capacity(count);
    let mut times = Vec::with_capacity(count);
    let mut events = Vec::with_capacity(count);
    let mut latent_risk = Vec::with_capacity(count);
    for id in 0..count {
        let risk = rng.uniform();
        let n = 8 + rng.below_usize(9);
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for &s in &signal {
                rows.push(rng.normal() + risk * s);
            }
        }
        bags.push(FeatureBag::new(id as u64, dim, rows)?);
        times.push(10.0 * (-1.5 * risk + 0.25 * rng.normal()).exp());
        events.push(rng.bernoulli(0.75));
        latent_risk.push(risk);
    }
    Ok(SurvivalDataset {
        bags,
        times,
        events,
        latent_risk,
    })
}

/// Labeled feature vectors drawn from Gaussian blobs.
#[derive(Debug, Clone)]
pub struct ClusterDataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl ClusterDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// `classes` Gaussian blobs of `per_class` points each, centers drawn once
/// at scale 5 and points spread by `spread` around them. Rows interleave
/// the classes, so label(i) = i mod classes.
pub fn clusters(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<ClusterDataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(UkdError::Parameter(format!(
            "cluster dataset needs positive classes, per_class, and dim, got {classes}/{per_class}/{dim}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(UkdError::Parameter(format!(
            "cluster spread must be positive and finite, got {spread}"
        )));
    }
    let mut rng = Rng::new(seed).substream(TAG_CLUSTERS);
    let centers: Vec<f64> = (0..classes * dim).map(|_| 5.0 * rng.normal()).collect();
    let total = classes * per_class;
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % classes;
        for d in 0..dim {
            features.push(centers[class * dim + d] + spread * rng.normal());
        }
        labels.push(class);
    }
    Ok(ClusterDataset {
        features,
        labels,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_finite() {
        let a = pretrain_textures(40, 16, 9).unwrap();
        let b = pretrain_textures(40, 16, 9).unwrap();
        assert_eq!(a.images.data, b.images.data);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data.iter().all(|v| v.is_finite()));
        let c = pretrain_textures(40, 16, 10).unwrap();
        assert_ne!(a.images.data, c.images.data);
        for class in 0..TEXTURE_CLASSES {
            assert!(a.labels.contains(&class), "class {class} never sampled");
        }
    }

    /// Horizontal stripes vary along y only, vertical along x only. The
    /// variance of row means vs column means must therefore separate the
    /// two stripe classes perfectly despite noise.
    #[test]
    fn stripe_orientation_is_recoverable() {
        let ds = pretrain_textures(300, 16, 3).unwrap();
        let size = 16;
        for (i, &label) in ds.labels.iter().enumerate() {
            if label == 2 {
                continue;
            }
            let mut row_means = vec![0.0; size];
            let mut col_means = vec![0.0; size];
            for y in 0..size {
                for x in 0..size {
                    let v = ds.images.data[(i * 3 * size + y) * size + x];
                    row_means[y] += v / size as f64;
                    col_means[x] += v / size as f64;
                }
            }
            let var = |m: &[f64]| {
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64
            };
            let along_y = var(&row_means);
            let along_x = var(&col_means);
            if label == 0 {
                assert!(along_y > along_x, "image {i}: {along_y} vs {along_x}");
            } else {
                assert!(along_x > along_y, "image {i}: {along_x} vs {along_y}");
            }
        }
    }

    #[test]
    fn zero_signal_rate_means_all_negative() {
        let ds = mil_bags(50, 8, 4, 9, 0.0, 11).unwrap();
        assert!(ds.labels.iter().all(|&l| l == 0));
        let ds = mil_bags(50, 8, 4, 9, 1.0, 11).unwrap();
        assert!(ds.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn mil_bags_shape_and_determinism() {
        let a = mil_bags(60, 16, 8, 16, 0.5, 21).unwrap();
        let b = mil_bags(60, 16, 8, 16, 0.5, 21).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.bags.iter().zip(&b.bags) {
            assert_eq!(x.instances(), y.instances());
            assert!((8..=16).contains(&x.n_instances()));
        }
        assert!(a.labels.iter().any(|&l| l == 0));
        assert!(a.labels.iter().any(|&l| l == 1));
    }

    /// Positive bags contain the planted signal, so their loudest instance
    /// is far from the noise floor.
    #[test]
    fn planted_signal_separates_bag_norms() {
        let ds = mil_bags(80, 32, 8, 16, 0.5, 5).unwrap();
        let max_norm = |bag: &FeatureBag| {
            (0..bag.n_instances())
                .map(|i| {
                    let row = &bag.instances()[i * 32..(i + 1) * 32];
                    row.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
        };
        let pos_min = ds
            .bags
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(b, _)| max_norm(b))
            .fold(f64::INFINITY, f64::min);
        let neg_max = ds
            .bags
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == 0)
            .map(|(b, _)| max_norm(b))
            .fold(0.0, f64::max);
        assert!(
            pos_min > neg_max,
            "weakest positive {pos_min} not above loudest negative {neg_max}"
        );
    }

    #[test]
    fn survival_times_anticorrelate_with_risk() {
        let ds = survival_bags(200, 16, 7).unwrap();
        assert!(ds.times.iter().all(|t| t.is_finite() && *t > 0.0));
        let mut high = Vec::new();
        let mut low = Vec::new();
        for (i, &r) in ds.latent_risk.iter().enumerate() {
            if r > 0.75 {
                high.push(ds.times[i]);
            } else if r < 0.25 {
                low.push(ds.times[i]);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&high) < mean(&low));
        assert!(ds.events.iter().any(|&e| e));
        assert!(ds.events.iter().any(|&e| !e));
        let again = survival_bags(200, 16, 7).unwrap();
        assert_eq!(ds.times, again.times);
        assert_eq!(ds.events, again.events);
    }

    /// With a tight spread, assigning each point to the nearest empirical
    /// class mean must recover every label.
    #[test]
    fn tight_clusters_are_perfectly_separable() {
        let ds = clusters(9, 30, 12, 0.1, 13).unwrap();
        assert_eq!(ds.len(), 270);
        let mut means = vec![vec![0.0; ds.dim]; 9];
        let mut counts = vec![0usize; 9];
        for i in 0..ds.len() {
            assert_eq!(ds.labels[i], i % 9);
            counts[ds.labels[i]] += 1;
            for (d, v) in ds.row(i).iter().enumerate() {
                means[ds.labels[i]][d] += v;
            }
        }
        assert!(counts.iter().all(|&c| c == 30));
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for i in 0..ds.len() {
            let best = (0..9)
                .min_by(|&a, &b| {
                    let da: f64 = ds.row(i).iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = ds.row(i).iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, ds.labels[i]);
        }
        let again = clusters(9, 30, 12, 0.1, 13).unwrap();
        assert_eq!(ds.features, again.features);
    }

    #[test]
    fn parameter_validation() {
        assert_eq!(pretrain_textures(0, 16, 1).unwrap_err().kind(), "parameter");
        assert_eq!(mil_bags(10, 0, 4, 8, 0.5, 1).unwrap_err().kind(), "parameter");
        assert_eq!(mil_bags(10, 8, 9, 8, 0.5, 1).unwrap_err().kind(), "parameter");
        assert_eq!(mil_bags(10, 8, 4, 8, 1.5, 1).unwrap_err().kind(), "parameter");
        assert_eq!(survival_bags(0, 8, 1).unwrap_err().kind(), "parameter");
        assert_eq!(clusters(9, 10, 8, 0.0, 1).unwrap_err().kind(), "parameter");
    }
}
