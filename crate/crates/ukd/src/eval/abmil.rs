//! Attention-based multiple instance learning: a gated attention pool over
//! instance features with a linear head, trained per bag with early
//! stopping on validation loss. The same trunk serves classification
//! (cross-entropy) and discrete-time survival (hazard NLL).

use crate::error::{Result, UkdError};
use crate::eval::survival::{nll_surv_graph, N_BINS};
use crate::eval::EpochLog;
use crate::nn::{init_linear, AdamHp, ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

/// One bag of instance feature vectors, row major `[n, dim]`.
#[derive(Debug, Clone)]
pub struct FeatureBag {
    pub id: u64,
    pub dim: usize,
    instances: Vec<f64>,
}

impl FeatureBag {
    pub fn new(id: u64, dim: usize, instances: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(UkdError::Parameter("instance dim must be positive".into()));
        }
        if instances.is_empty() {
            return Err(UkdError::Degenerate(format!("bag {id} is empty")));
        }
        if instances.len() % dim != 0 {
            return Err(UkdError::Dimension(format!(
                "bag {id}: {} values do not tile dim {dim}",
                instances.len()
            )));
        }
        Ok(Self { id, dim, instances })
    }

    pub fn n_instances(&self) -> usize {
        self.instances.len() / self.dim
    }

    pub fn instances(&self) -> &[f64] {
        &self.instances
    }
}

#[derive(Debug, Clone)]
pub struct AbmilConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Early stopping: halt after this many epochs without a validation
    /// improvement. Ignored when no validation set is given.
    pub patience: usize,
    /// Classifier classes, or hazard bins for the survival head.
    pub n_outputs: usize,
}

impl AbmilConfig {
    /// The standard preset: embed 512, hidden 128, dropout 0.25, lr 2e-4,
    /// up to 100 epochs.
    pub fn paper_preset(n_outputs: usize) -> Self {
        AbmilConfig {
            embed_dim: 512,
            hidden_dim: 128,
            dropout: 0.25,
            lr: 2e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 10,
            n_outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(UkdError::Config("attention dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(UkdError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(UkdError::Config("lr must be positive, weight decay non-negative".into()));
        }
        if self.patience == 0 {
            return Err(UkdError::Config("patience must be at least 1".into()));
        }
        if self.n_outputs < 2 {
            return Err(UkdError::Config("need at least 2 output units".into()));
        }
        Ok(())
    }
}

/// Fresh parameters: instance embedding, the two gate branches, the
/// attention scorer, and the output head.
pub fn init_abmil(in_dim: usize, cfg: &AbmilConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    if in_dim == 0 {
        return Err(UkdError::Parameter("input dim must be positive".into()));
    }
    let mut store = ParamStore::new();
    init_linear(&mut store, "embed", cfg.embed_dim, in_dim, true, rng)?;
    init_linear(&mut store, "att.v", cfg.hidden_dim, cfg.embed_dim, true, rng)?;
    init_linear(&mut store, "att.u", cfg.hidden_dim, cfg.embed_dim, true, rng)?;
    init_linear(&mut store, "att.s", 1, cfg.hidden_dim, false, rng)?;
    init_linear(&mut store, "head", cfg.n_outputs, cfg.embed_dim, true, rng)?;
    Ok(store)
}

/// Gated attention forward over one bag. Instances are embedded with a
/// ReLU layer, scored through tanh and sigmoid branches whose product
/// feeds a scalar scorer, softmax-normalized into attention weights, and
/// pooled into a single embedding for the head.
///
/// Returns `(logits [1, n_outputs], attention [1, n_instances])`.
/// `dropout` is only for training passes; evaluation passes `None`.
pub fn abmil_forward(
    g: &mut Graph,
    p: &Params,
    bag: &FeatureBag,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<(Var, Var)> {
    let n = bag.n_instances();
    if n == 0 {
        return Err(UkdError::Degenerate(format!("bag {} is empty", bag.id)));
    }
    let x = g.constant(&[n, bag.dim], bag.instances.clone());
    let pre = g.linear(x, p.var("embed.w")?, Some(p.var("embed.b")?))?;
    let mut e = g.relu(pre);
    if let Some((prob, rng)) = dropout {
        e = g.dropout(e, prob, rng)?;
    }
    let v_pre = g.linear(e, p.var("att.v.w")?, Some(p.var("att.v.b")?))?;
    let v = g.tanh(v_pre);
    let u_pre = g.linear(e, p.var("att.u.w")?, Some(p.var("att.u.b")?))?;
    let u = g.sigmoid(u_pre);
    let gate = g.mul(v, u)?;
    let scores = g.matmul_nt(gate, p.var("att.s.w")?)?;
    let row = g.reshape(scores, &[1, n])?;
    let attention = g.softmax(row, 1, 1.0)?;
    let pooled = g.matmul(attention, e)?;
    let logits = g.linear(pooled, p.var("head.w")?, Some(p.var("head.b")?))?;
    Ok((logits, attention))
}

/// What the head is trained against, one entry per bag.
enum BagTargets<'a> {
    Class(&'a [usize]),
    Survival { bins: &'a [usize], events: &'a [bool] },
}

impl BagTargets<'_> {
    fn len(&self) -> usize {
        match self {
            BagTargets::Class(l) => l.len(),
            BagTargets::Survival { bins, .. } => bins.len(),
        }
    }

    fn loss(&self, g: &mut Graph, logits: Var, i: usize) -> Result<Var> {
        match self {
            BagTargets::Class(labels) => {
                let logq = g.log_softmax(logits, 1, 1.0)?;
                let picked = g.gather_cols(logq, &[labels[i]])?;
                let m = g.mean_all(picked);
                Ok(g.neg(m))
            }
            BagTargets::Survival { bins, events } => {
                nll_surv_graph(g, logits, &bins[i..=i], &events[i..=i])
            }
        }
    }
}

fn check_bags(bags: &[FeatureBag], targets: &BagTargets, what: &str) -> Result<usize> {
    if bags.is_empty() {
        return Err(UkdError::Config(format!("{what} set is empty")));
    }
    if targets.len() != bags.len() {
        return Err(UkdError::Dimension(format!(
            "{} targets for {} {what} bags",
            targets.len(),
            bags.len()
        )));
    }
    let dim = bags[0].dim;
    if let Some(b) = bags.iter().find(|b| b.dim != dim) {
        return Err(UkdError::Dimension(format!("bag {} has dim {}, expected {dim}", b.id, b.dim)));
    }
    Ok(dim)
}

fn run_training(
    bags: &[FeatureBag],
    targets: BagTargets,
    val_bags: &[FeatureBag],
    val_targets: Option<BagTargets>,
    cfg: &AbmilConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    cfg.validate()?;
    let dim = check_bags(bags, &targets, "training")?;
    if let Some(vt) = &val_targets {
        let vdim = check_bags(val_bags, vt, "validation")?;
        if vdim != dim {
            return Err(UkdError::Dimension(format!("validation dim {vdim} vs train {dim}")));
        }
    }
    match &targets {
        BagTargets::Class(labels) => {
            if let Some(&l) = labels.iter().find(|&&l| l >= cfg.n_outputs) {
                return Err(UkdError::Parameter(format!("label {l} outside {} classes", cfg.n_outputs)));
            }
            let first = labels[0];
            if labels.iter().all(|&l| l == first) {
                return Err(UkdError::Config("training bags are all one class".into()));
            }
        }
        BagTargets::Survival { bins, .. } => {
            if cfg.n_outputs != N_BINS {
                return Err(UkdError::Config(format!(
                    "survival head needs {N_BINS} outputs, config says {}",
                    cfg.n_outputs
                )));
            }
            if let Some(&b) = bins.iter().find(|&&b| b >= N_BINS) {
                return Err(UkdError::Parameter(format!("bin {b} out of range")));
            }
        }
    }

    let mut rng = Rng::new(seed);
    let mut store = init_abmil(dim, cfg, &mut rng)?;
    let hp = AdamHp { weight_decay: cfg.weight_decay, ..AdamHp::default() };
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut strikes = 0usize;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let (logits, _) =
                abmil_forward(&mut g, &p, &bags[i], Some((cfg.dropout, &mut rng)))?;
            let loss = targets.loss(&mut g, logits, i)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(UkdError::Degenerate(format!("non-finite loss on bag {}", bags[i].id)));
            }
            train_loss += value;
            g.backward(loss)?;
            step += 1;
            store.adamw_step(&g, &p, &hp, cfg.lr, f64::INFINITY, step)?;
        }
        train_loss /= bags.len() as f64;

        let val_loss = match &val_targets {
            None => None,
            Some(vt) => {
                let mut total = 0.0;
                for (i, bag) in val_bags.iter().enumerate() {
                    let mut g = Graph::new();
                    let p = store.bind(&mut g, false);
                    let (logits, _) = abmil_forward(&mut g, &p, bag, None)?;
                    let loss = vt.loss(&mut g, logits, i)?;
                    total += g.scalar_value(loss);
                }
                Some(total / val_bags.len() as f64)
            }
        };
        logs.push(EpochLog { epoch, train_loss, val_loss });

        if let Some(v) = val_loss {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, store.clone()));
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= cfg.patience {
                    break;
                }
            }
        }
    }
    let final_store = match best {
        Some((_, s)) => s,
        None => store,
    };
    Ok((final_store, logs))
}

/// Train a bag classifier with cross-entropy. Returns the parameters of
/// the best validation epoch (the final epoch when `val` is empty) and the
/// per-epoch loss trace. `max_epochs == 0` returns the initialization.
pub fn train_abmil(
    bags: &[FeatureBag],
    labels: &[usize],
    val_bags: &[FeatureBag],
    val_labels: &[usize],
    cfg: &AbmilConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let val = if val_bags.is_empty() { None } else { Some(BagTargets::Class(val_labels)) };
    run_training(bags, BagTargets::Class(labels), val_bags, val, cfg, seed)
}

/// Train a survival head (4 hazard logits, discrete NLL) over bags whose
/// records carry a fitted bin and an event flag.
pub fn train_abmil_survival(
    bags: &[FeatureBag],
    bins: &[usize],
    events: &[bool],
    val_bags: &[FeatureBag],
    val_bins: &[usize],
    val_events: &[bool],
    cfg: &AbmilConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let val = if val_bags.is_empty() {
        None
    } else {
        Some(BagTargets::Survival { bins: val_bins, events: val_events })
    };
    run_training(bags, BagTargets::Survival { bins, events }, val_bags, val, cfg, seed)
}

/// Evaluation-mode forward pass: `(logits, attention)` as plain vectors.
pub fn abmil_predict(store: &ParamStore, bag: &FeatureBag) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (logits, attention) = abmil_forward(&mut g, &p, bag, None)?;
    Ok((g.values(logits).to_vec(), g.values(attention).to_vec()))
}

/// Scalar risk for a survival head: the sum of the predicted hazards.
pub fn abmil_risk(store: &ParamStore, bag: &FeatureBag) -> Result<f64> {
    let (logits, _) = abmil_predict(store, bag)?;
    Ok(logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).sum())
}
