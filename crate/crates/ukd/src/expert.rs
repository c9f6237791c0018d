//! Expert knowledge distillation: align student class and patch tokens with
//! frozen external teacher networks.
//!
//! Three teacher roles (`a`, `b`, `c`) carry independent class-token and
//! patch-token weights. Per global view, the class distance is a weighted
//! sum of cosine distances between adapter-projected student class tokens
//! and each teacher's class tokens; the patch distance adds a smooth-L1
//! term. The final loss averages the two global views. Zero-weight terms
//! are skipped structurally, so disabling a teacher is bit-equivalent to
//! removing it.
//!
//! Teacher outputs are plain values: nothing a provider returns ever enters
//! the gradient tape as a trainable node.

use crate::backbone::{ImageBatch, TokenOutput};
use crate::error::{Result, UkdError};
use crate::interp::resize_plane;
use crate::io::FeatureStore;
use crate::nn::{ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

// ── Roles and weights ───────────────────────────────────────────────────

/// The three teacher slots. Deploy-scale role mapping: `A` carries the
/// classification expert, `B` the report-generation expert, `C` the
/// visual-question-answering expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TeacherRole {
    A,
    B,
    C,
}

impl TeacherRole {
    pub fn tag(&self) -> &'static str {
        match self {
            TeacherRole::A => "a",
            TeacherRole::B => "b",
            TeacherRole::C => "c",
        }
    }

    pub fn all() -> [TeacherRole; 3] {
        [TeacherRole::A, TeacherRole::B, TeacherRole::C]
    }
}

/// Loss coefficients: per-teacher class weights (`alpha`, `beta`, `gamma`),
/// per-teacher patch weights (`mu`, `lambda`, `phi`), and the shared patch
/// term coefficients `eta` (cosine) and `theta` (smooth-L1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
    pub phi: f64,
    pub eta: f64,
    pub theta: f64,
}

impl DistillWeights {
    /// The published table values: class weights 1.0 / 0.5 / 1.0 and patch
    /// weights 0.25 / 0.125 / 0.0 for roles a / b / c. `eta` and `theta`
    /// default to 1.0 (the table weights the per-teacher sums, not the
    /// inner terms).
    pub fn paper_defaults() -> Self {
        DistillWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            mu: 0.25,
            lambda: 0.125,
            phi: 0.0,
            eta: 1.0,
            theta: 1.0,
        }
    }

    /// Everything off: the pretraining objective degenerates to
    /// self-distillation only.
    pub fn zeroed() -> Self {
        DistillWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            mu: 0.0,
            lambda: 0.0,
            phi: 0.0,
            eta: 0.0,
            theta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("lambda", self.lambda),
            ("phi", self.phi),
            ("eta", self.eta),
            ("theta", self.theta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(UkdError::Parameter(format!(
                    "distill weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn cls_weight(&self, role: TeacherRole) -> f64 {
        match role {
            TeacherRole::A => self.alpha,
            TeacherRole::B => self.beta,
            TeacherRole::C => self.gamma,
        }
    }

    pub fn patch_weight(&self, role: TeacherRole) -> f64 {
        match role {
            TeacherRole::A => self.mu,
            TeacherRole::B => self.lambda,
            TeacherRole::C => self.phi,
        }
    }

    fn role_active(&self, role: TeacherRole) -> bool {
        self.cls_weight(role) > 0.0 || self.patch_weight(role) > 0.0
    }
}

// ── Teacher providers ───────────────────────────────────────────────────

/// One teacher's output for a batch of views: class tokens `[batch * dim]`
/// and patch tokens `[batch * grid^2 * dim]`, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTokens {
    pub cls: Vec<f64>,
    pub patches: Vec<f64>,
    pub batch: usize,
    pub dim: usize,
    pub grid: usize,
}

impl TeacherTokens {
    pub fn validate(&self) -> Result<()> {
        if self.cls.len() != self.batch * self.dim {
            return Err(UkdError::Dimension(format!(
                "teacher cls length {} vs batch {} x dim {}",
                self.cls.len(),
                self.batch,
                self.dim
            )));
        }
        if self.patches.len() != self.batch * self.grid * self.grid * self.dim {
            return Err(UkdError::Dimension(format!(
                "teacher patch length {} vs batch {} x grid {}^2 x dim {}",
                self.patches.len(),
                self.batch,
                self.grid,
                self.dim
            )));
        }
        Ok(())
    }
}

/// A frozen source of teacher tokens. Implementations must be pure: the
/// same view, rows, and view index always produce the same values.
pub trait TeacherProvider {
    fn dim(&self) -> usize;
    fn grid(&self) -> usize;
    /// `image_rows` are dataset row indices of the batch images;
    /// `view_index` is 0 or 1 (the two global views). Pixel-driven
    /// providers may ignore both.
    fn tokens(
        &self,
        view: &ImageBatch,
        image_rows: &[u64],
        view_index: usize,
    ) -> Result<TeacherTokens>;
}

/// A fixed random featurizer over view pixels: per grid cell,
/// `tanh(W_p x + b_p)` of the cell's flattened pixels; the class token
/// pools the cells as the mean of `tanh(W_c x + b_c)` per cell, a
/// bag-of-random-features summary of the patch distribution. Deterministic
/// in its seed, sensitive to its input, and involves no trainable state.
pub struct FrozenRandomNetwork {
    dim: usize,
    grid: usize,
    view_size: usize,
    channels: usize,
    w_patch: Vec<f64>,
    b_patch: Vec<f64>,
    w_cls: Vec<f64>,
    b_cls: Vec<f64>,
}

impl FrozenRandomNetwork {
    pub fn new(seed: u64, dim: usize, grid: usize, view_size: usize, channels: usize) -> Result<Self> {
        if grid == 0 || view_size % grid != 0 {
            return Err(UkdError::Config(format!(
                "view size {view_size} not divisible by teacher grid {grid}"
            )));
        }
        if dim == 0 || channels == 0 {
            return Err(UkdError::Config("teacher dim and channels must be positive".into()));
        }
        let cell = view_size / grid;
        let pdim = cell * cell * channels;
        let mut rng = Rng::new(seed);
        let std = 1.0 / (pdim as f64).sqrt();
        let mut mat = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.normal() * s).collect() };
        let w_patch = mat(dim * pdim, std);
        let b_patch = mat(dim, 0.1);
        let w_cls = mat(dim * pdim, std);
        let b_cls = mat(dim, 0.1);
        Ok(FrozenRandomNetwork { dim, grid, view_size, channels, w_patch, b_patch, w_cls, b_cls })
    }

    fn cell_pixels(&self, view: &ImageBatch, b: usize, gy: usize, gx: usize) -> Vec<f64> {
        let cell = self.view_size / self.grid;
        let mut out = Vec::with_capacity(cell * cell * self.channels);
        for c in 0..self.channels {
            for y in 0..cell {
                for x in 0..cell {
                    let yy = gy * cell + y;
                    let xx = gx * cell + x;
                    out.push(view.data[((b * self.channels + c) * self.view_size + yy)
                        * self.view_size
                        + xx]);
                }
            }
        }
        out
    }

    fn apply(&self, w: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|o| {
                let row = &w[o * x.len()..(o + 1) * x.len()];
                let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                (s + bias[o]).tanh()
            })
            .collect()
    }
}

impl TeacherProvider for FrozenRandomNetwork {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn tokens(&self, view: &ImageBatch, _rows: &[u64], _vi: usize) -> Result<TeacherTokens> {
        if view.size != self.view_size || view.channels != self.channels {
            return Err(UkdError::Dimension(format!(
                "view {}x{} ch {} vs teacher expecting {}x{} ch {}",
                view.size, view.size, view.channels, self.view_size, self.view_size, self.channels
            )));
        }
        let t = self.grid * self.grid;
        let mut cls = Vec::with_capacity(view.batch * self.dim);
        let mut patches = Vec::with_capacity(view.batch * t * self.dim);
        for b in 0..view.batch {
            let mut pooled = vec![0.0; self.dim];
            for gy in 0..self.grid {
                for gx in 0..self.grid {
                    let px = self.cell_pixels(view, b, gy, gx);
                    let cf = self.apply(&self.w_cls, &self.b_cls, &px);
                    for (m, v) in pooled.iter_mut().zip(&cf) {
                        *m += v / t as f64;
                    }
                    patches.extend(self.apply(&self.w_patch, &self.b_patch, &px));
                }
            }
            cls.extend(pooled);
        }
        let out = TeacherTokens { cls, patches, batch: view.batch, dim: self.dim, grid: self.grid };
        out.validate()?;
        Ok(out)
    }
}

/// Teacher tokens precomputed into a [`FeatureStore`]: each store row holds
/// one view's class token followed by its `grid^2` patch tokens
/// (`dim * (1 + grid^2)` values). Rows are laid out as
/// `image_row * views_per_image + view_index`.
pub struct FeatureFileTeacher {
    store: FeatureStore,
    dim: usize,
    grid: usize,
    views_per_image: usize,
}

impl FeatureFileTeacher {
    pub fn new(store: FeatureStore, dim: usize, grid: usize, views_per_image: usize) -> Result<Self> {
        let expect = dim * (1 + grid * grid);
        if store.dim() != expect {
            return Err(UkdError::Dimension(format!(
                "feature store dim {} vs declared dim {dim} grid {grid} (expected {expect})",
                store.dim()
            )));
        }
        if views_per_image == 0 {
            return Err(UkdError::Config("views_per_image must be positive".into()));
        }
        Ok(FeatureFileTeacher { store, dim, grid, views_per_image })
    }
}

impl TeacherProvider for FeatureFileTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn tokens(&self, view: &ImageBatch, rows: &[u64], view_index: usize) -> Result<TeacherTokens> {
        if rows.len() != view.batch {
            return Err(UkdError::Dimension(format!(
                "{} image rows for batch {}",
                rows.len(),
                view.batch
            )));
        }
        if view_index >= self.views_per_image {
            return Err(UkdError::Contract(format!(
                "view index {view_index} of {}",
                self.views_per_image
            )));
        }
        let t = self.grid * self.grid;
        let mut cls = Vec::with_capacity(rows.len() * self.dim);
        let mut patches = Vec::with_capacity(rows.len() * t * self.dim);
        for &r in rows {
            let idx = r as usize * self.views_per_image + view_index;
            let row = self.store.row_f64(idx)?;
            cls.extend_from_slice(&row[..self.dim]);
            patches.extend_from_slice(&row[self.dim..]);
        }
        let out =
            TeacherTokens { cls, patches, batch: rows.len(), dim: self.dim, grid: self.grid };
        out.validate()?;
        Ok(out)
    }
}

// ── Adapters ────────────────────────────────────────────────────────────

/// Add the per-teacher student-side projections under `prefix`: for each
/// `(role, teacher_dim)`, a class map and a patch map (no bias), both
/// `[teacher_dim, student_dim]`.
pub fn init_adapters(
    store: &mut ParamStore,
    prefix: &str,
    student_dim: usize,
    teachers: &[(TeacherRole, usize)],
    rng: &mut Rng,
) -> Result<()> {
    for &(role, tdim) in teachers {
        for kind in ["cls", "patch"] {
            let name = format!("{prefix}.{}.{kind}.w", role.tag());
            let data: Vec<f64> =
                (0..tdim * student_dim).map(|_| rng.trunc_normal(0.02)).collect();
            store.add(&name, &[tdim, student_dim], data, true)?;
        }
    }
    Ok(())
}

// ── Grid alignment ──────────────────────────────────────────────────────

/// Resample one square token grid `[grid_src^2, dim]` onto `grid_dst`.
/// Bit-identical pass-through when the grids already match.
pub fn align_grid(tokens: &[f64], grid_src: usize, dim: usize, grid_dst: usize) -> Result<Vec<f64>> {
    if grid_src == 0 || grid_dst == 0 || dim == 0 {
        return Err(UkdError::Dimension("align_grid: empty grid or dim".into()));
    }
    if tokens.len() != grid_src * grid_src * dim {
        return Err(UkdError::Dimension(format!(
            "align_grid: {} values vs {grid_src}x{grid_src} grid of dim {dim}",
            tokens.len()
        )));
    }
    if grid_src == grid_dst {
        return Ok(tokens.to_vec());
    }
    Ok(resize_plane(tokens, dim, grid_src, grid_src, grid_dst, grid_dst))
}

fn align_grid_batch(
    tokens: &[f64],
    batch: usize,
    grid_src: usize,
    dim: usize,
    grid_dst: usize,
) -> Result<Vec<f64>> {
    let per = grid_src * grid_src * dim;
    let mut out = Vec::with_capacity(batch * grid_dst * grid_dst * dim);
    for b in 0..batch {
        out.extend(align_grid(&tokens[b * per..(b + 1) * per], grid_src, dim, grid_dst)?);
    }
    Ok(out)
}

// ── The loss ────────────────────────────────────────────────────────────

/// One teacher's tokens for both global views.
pub struct TeacherFeed<'a> {
    pub role: TeacherRole,
    pub views: [&'a TeacherTokens; 2],
}

/// Mean cosine distance over rows, computed as `0.5 * ||a_hat - b_hat||^2`
/// so identical inputs give exactly zero.
fn mean_cosine_distance(g: &mut Graph, a: Var, b: Var, rows: usize) -> Result<Var> {
    let an = g.l2_normalize_rows(a, 1e-12)?;
    let bn = g.l2_normalize_rows(b, 1e-12)?;
    let d = g.sub(an, bn)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, 0.5 / rows as f64))
}

/// The expert distillation distance, averaged over the two global views.
///
/// Per view and teacher `x` with class weight `w_c` and patch weight `w_p`:
/// the class term is `w_c * mean_b(1 - cos(sc', xc))`; the patch term is
/// `w_p * (eta * mean_rows(1 - cos(sp', xp)) + theta * SmoothL1(sp', xp))`,
/// with teacher patch grids bilinearly aligned to the student grid first.
/// Teachers whose both weights are zero are skipped structurally.
pub fn expert_loss(
    g: &mut Graph,
    adapters: &Params,
    adapter_prefix: &str,
    student_views: &[TokenOutput; 2],
    feeds: &[TeacherFeed<'_>],
    w: &DistillWeights,
) -> Result<Var> {
    w.validate()?;
    for (i, f) in feeds.iter().enumerate() {
        if feeds[..i].iter().any(|o| o.role == f.role) {
            return Err(UkdError::Contract(format!(
                "teacher role '{}' supplied twice",
                f.role.tag()
            )));
        }
    }
    for role in TeacherRole::all() {
        if w.role_active(role) && !feeds.iter().any(|f| f.role == role) {
            return Err(UkdError::Config(format!(
                "teacher '{}' has nonzero weight but no provider",
                role.tag()
            )));
        }
    }

    let mut view_sum: Option<Var> = None;
    for (vi, sview) in student_views.iter().enumerate() {
        let b = sview.batch;
        let ts = sview.tokens;
        let gs = (ts as f64).sqrt().round() as usize;
        if gs * gs != ts {
            return Err(UkdError::Dimension(format!("student token count {ts} is not square")));
        }
        let mut d_view: Option<Var> = None;
        for feed in feeds {
            let wc = w.cls_weight(feed.role);
            let wp = w.patch_weight(feed.role);
            if wc == 0.0 && wp == 0.0 {
                continue;
            }
            let tt = feed.views[vi];
            tt.validate()?;
            if tt.batch != b {
                return Err(UkdError::Dimension(format!(
                    "teacher '{}' batch {} vs student batch {b}",
                    feed.role.tag(),
                    tt.batch
                )));
            }
            let tag = feed.role.tag();
            if wc > 0.0 {
                let aw = adapters.var(&format!("{adapter_prefix}.{tag}.cls.w"))?;
                let sc_p = g.matmul_nt(sview.cls, aw)?;
                let xc = g.constant(&[b, tt.dim], tt.cls.clone());
                let term = mean_cosine_distance(g, sc_p, xc, b)?;
                let term = g.scale(term, wc);
                d_view = Some(match d_view {
                    Some(d) => g.add(d, term)?,
                    None => term,
                });
            }
            if wp > 0.0 {
                let aw = adapters.var(&format!("{adapter_prefix}.{tag}.patch.w"))?;
                let sp_p = g.matmul_nt(sview.patches, aw)?;
                let aligned = if tt.grid == gs {
                    tt.patches.clone()
                } else {
                    align_grid_batch(&tt.patches, b, tt.grid, tt.dim, gs)?
                };
                let xp = g.constant(&[b * ts, tt.dim], aligned);
                let mut d_xp: Option<Var> = None;
                if w.eta > 0.0 {
                    let cosd = mean_cosine_distance(g, sp_p, xp, b * ts)?;
                    d_xp = Some(g.scale(cosd, w.eta));
                }
                if w.theta > 0.0 {
                    let sl1 = g.smooth_l1(sp_p, xp, 1.0)?;
                    let sl1 = g.scale(sl1, w.theta);
                    d_xp = Some(match d_xp {
                        Some(d) => g.add(d, sl1)?,
                        None => sl1,
                    });
                }
                if let Some(d_xp) = d_xp {
                    let term = g.scale(d_xp, wp);
                    d_view = Some(match d_view {
                        Some(d) => g.add(d, term)?,
                        None => term,
                    });
                }
            }
        }
        let d_view = d_view.unwrap_or_else(|| g.scalar(0.0));
        view_sum = Some(match view_sum {
            Some(s) => g.add(s, d_view)?,
            None => d_view,
        });
    }
    Ok(g.scale(view_sum.expect("two views"), 0.5))
}

// ── Total objective ─────────────────────────────────────────────────────

/// Top-level loss weights for the two self-distillation components; the
/// expert term carries its own internal weights.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossWeights {
    pub dino: f64,
    pub ibot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dino: 1.0, ibot: 1.0 }
    }
}

/// The combined objective with per-component values retained for logging.
#[derive(Debug)]
pub struct PretrainLoss {
    pub total: Var,
    pub dino: f64,
    pub ibot: f64,
    pub expert: f64,
}

/// `total = w.dino * dino + w.ibot * ibot + expert`. A non-finite
/// component aborts with the component named.
pub fn total_pretrain_loss(
    g: &mut Graph,
    dino: Var,
    ibot: Var,
    expert: Var,
    w: &LossWeights,
) -> Result<PretrainLoss> {
    let parts = [("dino", dino), ("ibot", ibot), ("expert", expert)];
    for (name, v) in parts {
        let val = g.scalar_value(v);
        if !val.is_finite() {
            return Err(UkdError::Degenerate(format!("{name} loss is not finite ({val})")));
        }
    }
    let d = g.scale(dino, w.dino);
    let i = g.scale(ibot, w.ibot);
    let di = g.add(d, i)?;
    let total = g.add(di, expert)?;
    Ok(PretrainLoss {
        total,
        dino: g.scalar_value(dino),
        ibot: g.scalar_value(ibot),
        expert: g.scalar_value(expert),
    })
}
