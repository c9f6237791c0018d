//! Linear probing: a single linear classifier trained on frozen features,
//! the standard measure of representation quality.

use crate::error::{Result, UkdError};
use crate::eval::EpochLog;
use crate::nn::{init_linear, AdamHp, ParamStore};
use crate::rng::Rng;
use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct LinearProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig { lr: 5e-4, weight_decay: 1e-5, max_epochs: 3000, patience: 100, batch: 256 }
    }
}

impl LinearProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(UkdError::Config("lr must be positive, weight decay non-negative".into()));
        }
        if self.batch == 0 || self.patience == 0 {
            return Err(UkdError::Config("batch and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// A flat `[n, dim]` feature matrix with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct ProbeData<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub dim: usize,
}

impl<'a> ProbeData<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(UkdError::Parameter("feature dim must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(UkdError::Dimension(format!(
                "{} feature values for {} labels of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(UkdError::Degenerate("no records".into()));
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

/// Cosine-annealed learning rate over epochs, from `lr` down to 0.
fn lr_at_epoch(cfg: &LinearProbeConfig, epoch: usize) -> f64 {
    let progress = epoch as f64 / cfg.max_epochs.max(1) as f64;
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn batch_loss(
    store: &ParamStore,
    x: Vec<f64>,
    y: &[usize],
    train: bool,
) -> Result<(Graph, crate::nn::Params, f64)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, train);
    let input = g.constant(&[y.len(), x.len() / y.len()], x);
    let logits = g.linear(input, p.var("head.w")?, Some(p.var("head.b")?))?;
    let logq = g.log_softmax(logits, 1, 1.0)?;
    let picked = g.gather_cols(logq, y)?;
    let m = g.mean_all(picked);
    let loss = g.neg(m);
    let value = g.scalar_value(loss);
    if train {
        g.backward(loss)?;
    }
    Ok((g, p, value))
}

/// Fit one linear layer to frozen features with cosine-annealed AdamW and
/// early stopping on validation loss. Returns the parameters of the best
/// validation epoch (final epoch without a validation set) and the trace.
pub fn train_linear_probe(
    train: &ProbeData,
    val: Option<&ProbeData>,
    n_classes: usize,
    cfg: &LinearProbeConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    cfg.validate()?;
    if n_classes < 2 {
        return Err(UkdError::Config("need at least 2 classes".into()));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= n_classes) {
        return Err(UkdError::Parameter(format!("label {l} outside {n_classes} classes")));
    }
    if let Some(v) = val {
        if v.dim != train.dim {
            return Err(UkdError::Dimension(format!("val dim {} vs train {}", v.dim, train.dim)));
        }
        if let Some(&l) = v.labels.iter().find(|&&l| l >= n_classes) {
            return Err(UkdError::Parameter(format!("label {l} outside {n_classes} classes")));
        }
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(UkdError::Config("training features are all one class".into()));
    }

    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    init_linear(&mut store, "head", n_classes, train.dim, true, &mut rng)?;
    let hp = AdamHp { weight_decay: cfg.weight_decay, ..AdamHp::default() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut strikes = 0usize;
    let mut step = 0u64;

    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let lr = lr_at_epoch(cfg, epoch);
        let mut train_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = train.gather(chunk);
            let (g, bound, value) = batch_loss(&store, x, &y, true)?;
            if !value.is_finite() {
                return Err(UkdError::Degenerate("non-finite probe loss".into()));
            }
            train_loss += value;
            batches += 1.0;
            step += 1;
            store.adamw_step(&g, &bound, &hp, lr, f64::INFINITY, step)?;
        }
        train_loss /= batches;

        let val_loss = match val {
            None => None,
            Some(v) => {
                let idx: Vec<usize> = (0..v.len()).collect();
                let (x, y) = v.gather(&idx);
                let (_, _, value) = batch_loss(&store, x, &y, false)?;
                Some(value)
            }
        };
        logs.push(EpochLog { epoch, train_loss, val_loss });

        if let Some(vl) = val_loss {
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                best = Some((vl, store.clone()));
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((best.map(|(_, s)| s).unwrap_or(store), logs))
}

/// Class predictions for a feature matrix.
pub fn probe_predict(store: &ParamStore, data: &ProbeData) -> Result<Vec<usize>> {
    let scores = probe_scores(store, data)?;
    let classes = scores.len() / data.len();
    Ok(scores
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect())
}

/// Raw logits `[n, classes]` for a feature matrix.
pub fn probe_scores(store: &ParamStore, data: &ProbeData) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(&[data.len(), data.dim], data.features.to_vec());
    let logits = g.linear(x, p.var("head.w")?, Some(p.var("head.b")?))?;
    Ok(g.values(logits).to_vec())
}

/// Fraction of rows predicted correctly.
pub fn probe_accuracy(store: &ParamStore, data: &ProbeData) -> Result<f64> {
    let pred = probe_predict(store, data)?;
    let hits = pred.iter().zip(data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_classes(
        rng: &mut Rng,
        per_class: usize,
        dim: usize,
        spread: f64,
        centers: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                for d in 0..dim {
                    x.push(center[d] + rng.normal() * spread);
                }
                y.push(c);
            }
        }
        (x, y)
    }

    fn two_centers(dim: usize) -> Vec<Vec<f64>> {
        let a: Vec<f64> = (0..dim).map(|d| if d % 2 == 0 { 2.0 } else { -2.0 }).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        vec![a, b]
    }

    #[test]
    fn separable_gaussians_are_solved() {
        let mut rng = Rng::new(70);
        let centers = two_centers(6);
        let (x, y) = gaussian_classes(&mut rng, 60, 6, 0.3, &centers);
        let (vx, vy) = gaussian_classes(&mut rng, 20, 6, 0.3, &centers);
        let train = ProbeData::new(&x, &y, 6).unwrap();
        let val = ProbeData::new(&vx, &vy, 6).unwrap();
        let cfg = LinearProbeConfig { max_epochs: 200, patience: 30, ..Default::default() };
        let (store, logs) = train_linear_probe(&train, Some(&val), 2, &cfg, 5).unwrap();
        assert!(probe_accuracy(&store, &val).unwrap() >= 0.99);
        assert!(logs.len() <= 200);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = Rng::new(71);
        let centers = two_centers(5);
        let (x, mut y) = gaussian_classes(&mut rng, 150, 5, 0.3, &centers);
        rng.shuffle(&mut y);
        let train = ProbeData::new(&x[..250 * 5], &y[..250], 5).unwrap();
        let test = ProbeData::new(&x[250 * 5..], &y[250..], 5).unwrap();
        let cfg = LinearProbeConfig { max_epochs: 120, ..Default::default() };
        let (store, _) = train_linear_probe(&train, None, 2, &cfg, 6).unwrap();
        let acc = probe_accuracy(&store, &test).unwrap();
        // Chance is 1/2; 3 sigma of a Bernoulli mean over 50 rows is ~0.21.
        assert!((acc - 0.5).abs() < 0.21, "shuffled labels gave accuracy {acc}");
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut rng = Rng::new(72);
        let centers = two_centers(4);
        let (x, y) = gaussian_classes(&mut rng, 30, 4, 0.5, &centers);
        let train = ProbeData::new(&x, &y, 4).unwrap();
        let cfg = LinearProbeConfig { max_epochs: 20, ..Default::default() };
        let (s1, l1) = train_linear_probe(&train, None, 2, &cfg, 11).unwrap();
        let (s2, l2) = train_linear_probe(&train, None, 2, &cfg, 11).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
        for (ea, eb) in s1.entries().iter().zip(s2.entries()) {
            assert_eq!(ea.data, eb.data);
        }
    }

    #[test]
    fn dimension_and_class_errors() {
        assert_eq!(ProbeData::new(&[1.0; 10], &[0, 1], 4).unwrap_err().kind(), "dimension");
        let x = vec![0.0; 12];
        let y = vec![0usize, 0, 0];
        let train = ProbeData::new(&x, &y, 4).unwrap();
        let cfg = LinearProbeConfig::default();
        assert_eq!(train_linear_probe(&train, None, 2, &cfg, 1).unwrap_err().kind(), "config");
        let y2 = vec![0usize, 1, 5];
        let bad = ProbeData::new(&x, &y2, 4).unwrap();
        assert_eq!(train_linear_probe(&bad, None, 2, &cfg, 1).unwrap_err().kind(), "parameter");
    }

    #[test]
    fn cosine_schedule_starts_at_lr_and_decays() {
        let cfg = LinearProbeConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), cfg.lr);
        assert!(lr_at_epoch(&cfg, 1500) < cfg.lr);
        assert!(lr_at_epoch(&cfg, 2999) < lr_at_epoch(&cfg, 1500));
    }
}
