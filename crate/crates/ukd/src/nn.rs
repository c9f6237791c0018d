//! Named parameter trees and the AdamW optimizer.
//!
//! A [`ParamStore`] owns the persistent state of a model: parameter values
//! plus first/second Adam moments, keyed by hierarchical names in insertion
//! order (iteration order is part of determinism, so no hash-order leaks).
//! Each training step binds the store into a fresh [`crate::tensor::Graph`]
//! ([`ParamStore::bind`]), runs forward/backward, then applies
//! [`ParamStore::adamw_step`].
//!
//! The store computes in `f64`. Long-running training quantizes state through
//! `f32` after each step ([`ParamStore::round_to_f32`]) so checkpoints, which
//! serialize `f32` payloads, roundtrip without loss.

use std::collections::HashMap;

use crate::error::{Result, UkdError};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// First moment (Adam m).
    pub m: Vec<f64>,
    /// Second moment (Adam v).
    pub v: Vec<f64>,
    /// Whether decoupled weight decay applies (matrices yes, vectors no).
    pub decay: bool,
}

/// Ordered, named parameter tree with optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Per-graph binding of a store: `vars[i]` is the graph tensor of entry `i`.
#[derive(Debug, Clone)]
pub struct Params {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Params {
    /// Assemble a binding from explicit (name, var) pairs; used when a graph
    /// is built around hand-made tensors rather than a [`ParamStore`].
    pub fn from_named(pairs: &[(&str, Var)]) -> Self {
        let mut index = HashMap::new();
        let mut vars = Vec::new();
        for (name, var) in pairs {
            index.insert((*name).to_string(), vars.len());
            vars.push(*var);
        }
        Params { vars, index }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| UkdError::Parameter(format!("unknown parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct AdamHp {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        AdamHp { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.04 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, decay: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(UkdError::Parameter(format!("duplicate parameter '{name}'")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(UkdError::Dimension(format!(
                "parameter '{name}': {} values for shape {shape:?}",
                data.len()
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            data,
            decay,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Materialize every parameter as a graph tensor.
    /// `trainable` controls `requires_grad` (teachers bind frozen).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Params {
        let vars = self
            .entries
            .iter()
            .map(|e| g.input(&e.shape, e.data.clone(), trainable))
            .collect();
        Params { vars, index: self.index.clone() }
    }

    /// Global L2 norm of the bound gradients (missing gradients count as 0).
    pub fn grad_norm(&self, g: &Graph, p: &Params) -> f64 {
        let mut sq = 0.0;
        for &v in &p.vars {
            if let Some(gr) = g.grad(v) {
                for x in gr {
                    sq += x * x;
                }
            }
        }
        sq.sqrt()
    }

    /// One AdamW update from the gradients accumulated in `g`.
    ///
    /// `t` is the 1-based step for bias correction. `clip` is a global L2
    /// gradient-norm ceiling; pass `f64::INFINITY` to disable. When the norm
    /// is at or below the ceiling, gradients are used untouched (no scaling
    /// by 1.0 round-off). Returns the pre-clip gradient norm.
    pub fn adamw_step(
        &mut self,
        g: &Graph,
        p: &Params,
        hp: &AdamHp,
        lr: f64,
        clip: f64,
        t: u64,
    ) -> Result<f64> {
        if p.vars.len() != self.entries.len() {
            return Err(UkdError::Parameter(format!(
                "binding has {} vars for {} entries",
                p.vars.len(),
                self.entries.len()
            )));
        }
        if t == 0 {
            return Err(UkdError::Parameter("adamw_step: t is 1-based".into()));
        }
        let norm = self.grad_norm(g, p);
        if !norm.is_finite() {
            return Err(UkdError::Degenerate(format!("non-finite gradient norm {norm}")));
        }
        let coef = if norm > clip { clip / norm } else { 1.0 };
        let bc1 = 1.0 - hp.beta1.powi(t as i32);
        let bc2 = 1.0 - hp.beta2.powi(t as i32);
        let zero = [0.0];
        for (entry, &var) in self.entries.iter_mut().zip(&p.vars) {
            let grad = g.grad(var);
            for i in 0..entry.data.len() {
                let gi = match grad {
                    Some(gr) => {
                        if coef == 1.0 {
                            gr[i]
                        } else {
                            gr[i] * coef
                        }
                    }
                    None => zero[0],
                };
                entry.m[i] = hp.beta1 * entry.m[i] + (1.0 - hp.beta1) * gi;
                entry.v[i] = hp.beta2 * entry.v[i] + (1.0 - hp.beta2) * gi * gi;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                let mut upd = lr * mhat / (vhat.sqrt() + hp.eps);
                if entry.decay {
                    upd += lr * hp.weight_decay * entry.data[i];
                }
                entry.data[i] -= upd;
            }
        }
        Ok(norm)
    }

    /// Exponential moving average toward `student`:
    /// `theta_t <- m * theta_t + (1 - m) * theta_s`, per element.
    ///
    /// Structures must match exactly (same names, same shapes, same order).
    pub fn ema_from(&mut self, student: &ParamStore, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(UkdError::Parameter(format!("EMA momentum {momentum} outside [0,1]")));
        }
        // Match by name: every tracked entry must exist in the student with
        // the same shape. The student may carry extra entries (for example
        // teacher-adapter projections that are never averaged).
        for t in &mut self.entries {
            let s = student.index.get(&t.name).map(|&i| &student.entries[i]).ok_or_else(|| {
                UkdError::Parameter(format!("EMA: student has no entry '{}'", t.name))
            })?;
            if t.shape != s.shape {
                return Err(UkdError::Parameter(format!(
                    "EMA: entry '{}' shape {:?} vs student {:?}",
                    t.name, t.shape, s.shape
                )));
            }
            for (tv, sv) in t.data.iter_mut().zip(&s.data) {
                *tv = momentum * *tv + (1.0 - momentum) * sv;
            }
        }
        Ok(())
    }

    /// Quantize all state through `f32`, making it exactly representable in
    /// checkpoint payloads. Idempotent.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.data.iter_mut().chain(e.m.iter_mut()).chain(e.v.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }
}

// ── Initialization helpers ──────────────────────────────────────────────

/// Add `{prefix}.w [out, in]` (truncated normal, std 0.02, with decay) and,
/// if `bias`, `{prefix}.b [out]` (zeros, no decay).
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    bias: bool,
    rng: &mut Rng,
) -> Result<()> {
    let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.trunc_normal(0.02)).collect();
    store.add(&format!("{prefix}.w"), &[out_dim, in_dim], w, true)?;
    if bias {
        store.add(&format!("{prefix}.b"), &[out_dim], vec![0.0; out_dim], false)?;
    }
    Ok(())
}

/// Add `{prefix}.g` (ones) and `{prefix}.b` (zeros) for a layernorm over `d`.
pub fn init_layernorm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.add(&format!("{prefix}.g"), &[d], vec![1.0; d], false)?;
    store.add(&format!("{prefix}.b"), &[d], vec![0.0; d], false)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store(x0: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", &[x0.len()], x0.to_vec(), false).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", &[1], vec![0.0], false).unwrap();
        assert!(s.add("a", &[1], vec![0.0], false).is_err());
    }

    #[test]
    fn bind_exposes_current_values() {
        let mut s = ParamStore::new();
        s.add("w", &[2], vec![1.5, -2.5], true).unwrap();
        let mut g = Graph::new();
        let p = s.bind(&mut g, true);
        assert_eq!(g.values(p.var("w").unwrap()), &[1.5, -2.5]);
        assert!(p.var("nope").is_err());
    }

    #[test]
    fn adamw_descends_a_convex_quadratic() {
        // f(x) = sum (x - c)^2; gradient 2(x - c).
        let target = [3.0, -1.0, 0.5];
        let mut store = quad_store(&[0.0, 0.0, 0.0]);
        let hp = AdamHp { weight_decay: 0.0, ..AdamHp::default() };
        let mut losses = Vec::new();
        for t in 1..=400u64 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let x = p.var("x").unwrap();
            let c = g.constant(&[3], target.to_vec());
            let d = g.sub(x, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum_all(sq);
            losses.push(g.scalar_value(loss));
            g.backward(loss).unwrap();
            store.adamw_step(&g, &p, &hp, 0.05, f64::INFINITY, t).unwrap();
        }
        assert!(losses[399] < 1e-3, "final loss {}", losses[399]);
        // Monotone trend over coarse windows (Adam may wiggle stepwise).
        assert!(losses[100] < losses[0]);
        assert!(losses[350] < losses[100]);
    }

    #[test]
    fn weight_decay_applies_only_to_flagged_entries() {
        let mut s = ParamStore::new();
        s.add("w", &[1], vec![1.0], true).unwrap();
        s.add("b", &[1], vec![1.0], false).unwrap();
        let hp = AdamHp { weight_decay: 0.1, ..AdamHp::default() };
        // Graph not touching either parameter: gradients are zero.
        let mut g = Graph::new();
        let p = s.bind(&mut g, true);
        s.adamw_step(&g, &p, &hp, 0.5, f64::INFINITY, 1).unwrap();
        assert!(s.entry("w").unwrap().data[0] < 1.0);
        assert_eq!(s.entry("b").unwrap().data[0], 1.0);
    }

    #[test]
    fn clip_is_inactive_on_small_gradients() {
        let run = |clip: f64| {
            let mut store = quad_store(&[0.1, -0.2]);
            let hp = AdamHp { weight_decay: 0.0, ..AdamHp::default() };
            for t in 1..=5u64 {
                let mut g = Graph::new();
                let p = store.bind(&mut g, true);
                let x = p.var("x").unwrap();
                let sq = g.mul(x, x).unwrap();
                let loss = g.sum_all(sq);
                g.backward(loss).unwrap();
                store.adamw_step(&g, &p, &hp, 0.01, clip, t).unwrap();
            }
            store.entry("x").unwrap().data.clone()
        };
        let a = run(f64::INFINITY);
        let b = run(1e6);
        assert_eq!(a, b, "inactive clip must be bit-transparent");
    }

    #[test]
    fn clip_rescales_large_gradients_to_ceiling() {
        let mut store = quad_store(&[100.0]);
        let hp = AdamHp::default();
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = p.var("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let norm = store.adamw_step(&g, &p, &hp, 0.0, 1.0, 1).unwrap();
        assert!((norm - 200.0).abs() < 1e-9, "pre-clip norm should be reported");
    }

    #[test]
    fn ema_identity_and_copy_endpoints() {
        let mut teacher = ParamStore::new();
        teacher.add("w", &[2], vec![1.0, 2.0], true).unwrap();
        let mut student = ParamStore::new();
        student.add("w", &[2], vec![5.0, 6.0], true).unwrap();

        let mut t1 = teacher.clone();
        t1.ema_from(&student, 1.0).unwrap();
        assert_eq!(t1.entry("w").unwrap().data, vec![1.0, 2.0]);

        let mut t0 = teacher.clone();
        t0.ema_from(&student, 0.0).unwrap();
        assert_eq!(t0.entry("w").unwrap().data, vec![5.0, 6.0]);
    }

    #[test]
    fn ema_matches_closed_form_against_constant_student() {
        let m = 0.992f64;
        let k = 10;
        let theta0 = 4.0;
        let thetas = -2.0;
        let mut teacher = ParamStore::new();
        teacher.add("w", &[1], vec![theta0], true).unwrap();
        let mut student = ParamStore::new();
        student.add("w", &[1], vec![thetas], true).unwrap();
        for _ in 0..k {
            teacher.ema_from(&student, m).unwrap();
        }
        let expect = m.powi(k) * theta0 + (1.0 - m.powi(k)) * thetas;
        let got = teacher.entry("w").unwrap().data[0];
        assert!((got - expect).abs() < 1e-10, "got {got}, expected {expect}");
    }

    #[test]
    fn ema_rejects_structural_mismatch() {
        let mut teacher = ParamStore::new();
        teacher.add("w", &[2], vec![0.0; 2], true).unwrap();
        let mut student = ParamStore::new();
        student.add("w2", &[2], vec![0.0; 2], true).unwrap();
        assert!(teacher.ema_from(&student, 0.9).is_err());
        let mut s2 = ParamStore::new();
        s2.add("w", &[3], vec![0.0; 3], true).unwrap();
        assert!(teacher.ema_from(&s2, 0.9).is_err());
    }

    #[test]
    fn ema_stays_inside_convex_hull() {
        let mut rng = Rng::new(31);
        let mut teacher = ParamStore::new();
        teacher.add("w", &[8], (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), true).unwrap();
        for _ in 0..50 {
            let mut student = ParamStore::new();
            student
                .add("w", &[8], (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), true)
                .unwrap();
            teacher.ema_from(&student, rng.uniform()).unwrap();
            for &v in &teacher.entry("w").unwrap().data {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut s = ParamStore::new();
        s.add("w", &[3], vec![0.1, std::f64::consts::PI, -7.77], true).unwrap();
        s.round_to_f32();
        let once = s.entry("w").unwrap().data.clone();
        s.round_to_f32();
        assert_eq!(once, s.entry("w").unwrap().data);
        for &v in &once {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
