//! Self-distillation: multi-crop views, projection heads, and the two
//! student-teacher losses.
//!
//! The student sees two global crops (masked for patch prediction) plus a
//! set of small local crops; the EMA teacher sees only the two global crops,
//! unmasked. The class-token loss matches student view distributions to
//! centered, sharpened teacher distributions across all non-identical view
//! pairs. The patch loss matches student patch distributions to the
//! teacher's at masked positions only.
//!
//! Teacher quantities are plain `f64` values (never graph nodes), so no
//! gradient can flow into the teacher by construction.

use crate::backbone::{sample_mask, ImageBatch, MaskSpec};
use crate::error::{Result, UkdError};
use crate::interp::resize_plane;
use crate::nn::{init_linear, ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::vmath::centered_softmax_rows;
use crate::tensor::{Graph, Var};

// ── Views ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct CropConfig {
    pub global_size: usize,
    pub local_size: usize,
    /// Area fraction range for global crops.
    pub global_scale: (f64, f64),
    /// Area fraction range for local crops.
    pub local_scale: (f64, f64),
    pub local_count: usize,
    pub hflip_prob: f64,
    /// Fraction of patch tokens masked in each student global view.
    pub mask_ratio: f64,
}

impl CropConfig {
    pub fn full_scale() -> Self {
        CropConfig {
            global_size: 224,
            local_size: 98,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            local_count: 8,
            hflip_prob: 0.5,
            mask_ratio: 0.3,
        }
    }

    /// Desk-scale: 16-pixel globals, 8-pixel locals, fewer locals per image.
    pub fn toy() -> Self {
        CropConfig {
            global_size: 16,
            local_size: 8,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            local_count: 4,
            hflip_prob: 0.5,
            mask_ratio: 0.3,
        }
    }

    pub fn validate(&self, source_size: usize) -> Result<()> {
        if self.global_size == 0 || self.local_size == 0 || self.local_size > self.global_size {
            return Err(UkdError::Config(format!(
                "crop sizes local {} / global {} are inconsistent",
                self.local_size, self.global_size
            )));
        }
        if source_size < self.global_size {
            return Err(UkdError::Config(format!(
                "source side {source_size} smaller than global crop {}",
                self.global_size
            )));
        }
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(UkdError::Config(format!("crop scale range ({lo}, {hi}) invalid")));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(UkdError::Config("hflip/mask probabilities outside [0,1]".into()));
        }
        Ok(())
    }
}

/// One training batch worth of augmented views.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub globals: [ImageBatch; 2],
    pub locals: Vec<ImageBatch>,
    /// Patch masks for the student's two global views, one spec per image.
    pub masks: [Vec<MaskSpec>; 2],
}

impl ViewSet {
    /// Views per source image, globals first. Feature files for external
    /// teachers index rows by `image_row * view_count + view_index`.
    pub fn view_count(cfg: &CropConfig) -> usize {
        2 + cfg.local_count
    }
}

/// One square random-resized crop of image `b`, optionally mirrored,
/// resized to `out`.
fn crop_one(
    src: &ImageBatch,
    b: usize,
    out: usize,
    scale: (f64, f64),
    hflip_prob: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let s = src.size;
    let area = rng.uniform_in(scale.0, scale.1);
    let side = ((area.sqrt() * s as f64).round() as usize).clamp(1, s);
    let y0 = rng.below_usize(s - side + 1);
    let x0 = rng.below_usize(s - side + 1);
    let flip = rng.bernoulli(hflip_prob);
    let mut outv = Vec::with_capacity(src.channels * out * out);
    for c in 0..src.channels {
        let plane_off = (b * src.channels + c) * s * s;
        let mut region = Vec::with_capacity(side * side);
        for y in 0..side {
            let row = plane_off + (y0 + y) * s + x0;
            region.extend_from_slice(&src.data[row..row + side]);
        }
        let resized = resize_plane(&region, 1, side, side, out, out);
        if flip {
            for y in 0..out {
                for x in 0..out {
                    outv.push(resized[y * out + (out - 1 - x)]);
                }
            }
        } else {
            outv.extend_from_slice(&resized);
        }
    }
    outv
}

/// Generate the full view set for a source batch. Deterministic in `rng`:
/// per image the draw order is global 0, global 1, then each local; masks
/// for the two global views are drawn afterwards, image by image.
/// `mask_tokens` is the patch-token count of a global view.
pub fn make_views(
    source: &ImageBatch,
    cfg: &CropConfig,
    mask_tokens: usize,
    rng: &mut Rng,
) -> Result<ViewSet> {
    cfg.validate(source.size)?;
    let b = source.batch;
    if b == 0 {
        return Err(UkdError::Dimension("empty source batch".into()));
    }
    let mut g0 = Vec::new();
    let mut g1 = Vec::new();
    let mut locals: Vec<Vec<f64>> = vec![Vec::new(); cfg.local_count];
    for bi in 0..b {
        g0.extend(crop_one(source, bi, cfg.global_size, cfg.global_scale, cfg.hflip_prob, rng));
        g1.extend(crop_one(source, bi, cfg.global_size, cfg.global_scale, cfg.hflip_prob, rng));
        for l in locals.iter_mut() {
            l.extend(crop_one(source, bi, cfg.local_size, cfg.local_scale, cfg.hflip_prob, rng));
        }
    }
    let mut masks0 = Vec::with_capacity(b);
    let mut masks1 = Vec::with_capacity(b);
    for _ in 0..b {
        masks0.push(sample_mask(mask_tokens, cfg.mask_ratio, rng)?);
    }
    for _ in 0..b {
        masks1.push(sample_mask(mask_tokens, cfg.mask_ratio, rng)?);
    }
    Ok(ViewSet {
        globals: [
            ImageBatch::new(g0, b, source.channels, cfg.global_size)?,
            ImageBatch::new(g1, b, source.channels, cfg.global_size)?,
        ],
        locals: locals
            .into_iter()
            .map(|l| ImageBatch::new(l, b, source.channels, cfg.local_size))
            .collect::<Result<_>>()?,
        masks: [masks0, masks1],
    })
}

// ── Projection head ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl HeadConfig {
    pub fn toy(in_dim: usize) -> Self {
        HeadConfig { in_dim, hidden: 64, bottleneck: 16, prototypes: 256 }
    }
}

/// Three-layer MLP to an L2-normalized bottleneck, scored against
/// L2-normalized prototypes. Logits live in [-1, 1]; temperatures are
/// applied by the losses.
pub fn init_head(store: &mut ParamStore, prefix: &str, cfg: &HeadConfig, rng: &mut Rng) -> Result<()> {
    if cfg.prototypes < 2 {
        return Err(UkdError::Config("head needs at least 2 prototypes".into()));
    }
    init_linear(store, &format!("{prefix}.l1"), cfg.hidden, cfg.in_dim, true, rng)?;
    init_linear(store, &format!("{prefix}.l2"), cfg.hidden, cfg.hidden, true, rng)?;
    init_linear(store, &format!("{prefix}.l3"), cfg.bottleneck, cfg.hidden, true, rng)?;
    let protos: Vec<f64> =
        (0..cfg.prototypes * cfg.bottleneck).map(|_| rng.trunc_normal(0.02)).collect();
    store.add(&format!("{prefix}.protos"), &[cfg.prototypes, cfg.bottleneck], protos, true)?;
    Ok(())
}

pub fn head_forward(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    cfg: &HeadConfig,
    x: Var,
) -> Result<Var> {
    if g.shape(x).last() != Some(&cfg.in_dim) {
        return Err(UkdError::Dimension(format!(
            "head input {:?} does not end in {}",
            g.shape(x),
            cfg.in_dim
        )));
    }
    let mut h = x;
    for (layer, outd) in [("l1", cfg.hidden), ("l2", cfg.hidden)] {
        let w = p.var(&format!("{prefix}.{layer}.w"))?;
        let b = p.var(&format!("{prefix}.{layer}.b"))?;
        h = g.linear(h, w, Some(b))?;
        h = g.gelu(h);
        debug_assert_eq!(g.shape(h).last(), Some(&outd));
    }
    let w3 = p.var(&format!("{prefix}.l3.w"))?;
    let b3 = p.var(&format!("{prefix}.l3.b"))?;
    let z = g.linear(h, w3, Some(b3))?;
    let zn = g.l2_normalize_rows(z, 1e-12)?;
    let protos = p.var(&format!("{prefix}.protos"))?;
    let pn = g.l2_normalize_rows(protos, 1e-12)?;
    g.matmul_nt(zn, pn)
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Class-token self-distillation inputs. Teacher logits are raw values for
/// the two global views (`[batch * prototypes]` each); student logit vars
/// are `[batch, prototypes]`, with views 0 and 1 the globals and the rest
/// locals.
pub struct DinoLossInputs<'a> {
    pub teacher_cls_logits: [&'a [f64]; 2],
    pub student_cls_logits: &'a [Var],
    pub center: &'a [f64],
    pub tau_teacher: f64,
    pub tau_student: f64,
}

/// Mean cross-entropy over all (teacher global, student view) pairs with
/// the same-view pairs excluded, then over the batch.
pub fn dino_loss(g: &mut Graph, inp: &DinoLossInputs) -> Result<Var> {
    let views = inp.student_cls_logits.len();
    if views < 2 {
        return Err(UkdError::Dimension("need at least the two global student views".into()));
    }
    let shape = g.shape(inp.student_cls_logits[0]).to_vec();
    if shape.len() != 2 {
        return Err(UkdError::Dimension("student logits must be [batch, prototypes]".into()));
    }
    let (b, k) = (shape[0], shape[1]);
    if inp.center.len() != k {
        return Err(UkdError::Dimension(format!("center length {} vs {k}", inp.center.len())));
    }
    for &t in &inp.teacher_cls_logits {
        if t.len() != b * k {
            return Err(UkdError::Dimension(format!(
                "teacher logits length {} vs batch {b} x {k}",
                t.len()
            )));
        }
    }
    let mut total: Option<Var> = None;
    let mut pairs = 0usize;
    for (ti, tlogits) in inp.teacher_cls_logits.iter().enumerate() {
        let probs = centered_softmax_rows(tlogits, k, inp.center, inp.tau_teacher);
        let pvar = g.constant(&[b, k], probs);
        for (sj, &svar) in inp.student_cls_logits.iter().enumerate() {
            if sj == ti {
                continue;
            }
            if g.shape(svar) != shape.as_slice() {
                return Err(UkdError::Dimension("student views disagree in shape".into()));
            }
            let logq = g.log_softmax(svar, 1, inp.tau_student)?;
            let ce = g.cross_entropy(pvar, logq)?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
            pairs += 1;
        }
    }
    Ok(g.scale(total.expect("at least two views"), 1.0 / pairs as f64))
}

/// Patch-level distillation inputs. Teacher patch logits come from the
/// unmasked teacher forward on the same global views; student patch logits
/// from the masked student forward. Rows are image-major
/// (`[batch * tokens, prototypes]`).
pub struct IbotLossInputs<'a> {
    pub teacher_patch_logits: [&'a [f64]; 2],
    pub student_patch_logits: [Var; 2],
    pub masks: &'a [Vec<MaskSpec>; 2],
    pub tokens: usize,
    pub tau_teacher: f64,
    pub tau_student: f64,
}

/// Cross-entropy at masked patch positions only, averaged over every
/// masked position across both global views. No teacher centering here.
/// With nothing masked the loss is exactly zero.
pub fn ibot_loss(g: &mut Graph, inp: &IbotLossInputs) -> Result<Var> {
    let shape = g.shape(inp.student_patch_logits[0]).to_vec();
    if shape.len() != 2 {
        return Err(UkdError::Dimension("student patch logits must be [rows, prototypes]".into()));
    }
    let k = shape[1];
    let rows_total = shape[0];
    if inp.tokens == 0 || rows_total % inp.tokens != 0 {
        return Err(UkdError::Dimension(format!(
            "patch rows {rows_total} not divisible by tokens {}",
            inp.tokens
        )));
    }
    let b = rows_total / inp.tokens;
    let mut per_view: Vec<(Var, usize)> = Vec::new();
    let mut total_rows = 0usize;
    for v in 0..2 {
        if g.shape(inp.student_patch_logits[v]) != shape.as_slice() {
            return Err(UkdError::Dimension("patch logit views disagree in shape".into()));
        }
        if inp.teacher_patch_logits[v].len() != rows_total * k {
            return Err(UkdError::Dimension("teacher patch logits have the wrong length".into()));
        }
        if inp.masks[v].len() != b {
            return Err(UkdError::Dimension(format!(
                "{} mask specs for batch {b}",
                inp.masks[v].len()
            )));
        }
        let mut rows: Vec<usize> = Vec::new();
        for (bi, spec) in inp.masks[v].iter().enumerate() {
            for &pos in &spec.positions {
                if pos >= inp.tokens {
                    return Err(UkdError::Contract(format!(
                        "mask position {pos} outside {} tokens",
                        inp.tokens
                    )));
                }
                rows.push(bi * inp.tokens + pos);
            }
        }
        if rows.is_empty() {
            continue;
        }
        // Teacher distributions at the masked rows, values-space.
        let mut tsel = Vec::with_capacity(rows.len() * k);
        for &r in &rows {
            tsel.extend_from_slice(&inp.teacher_patch_logits[v][r * k..(r + 1) * k]);
        }
        let probs = centered_softmax_rows(&tsel, k, &[], inp.tau_teacher);
        let pvar = g.constant(&[rows.len(), k], probs);
        let ssel = g.select_rows(inp.student_patch_logits[v], &rows)?;
        let logq = g.log_softmax(ssel, 1, inp.tau_student)?;
        let ce = g.cross_entropy(pvar, logq)?;
        total_rows += rows.len();
        per_view.push((ce, rows.len()));
    }
    if per_view.is_empty() {
        return Ok(g.scalar(0.0));
    }
    // Pool to a mean over all masked rows: each view's mean is weighted by
    // its row share.
    let mut total: Option<Var> = None;
    for (ce, n) in per_view {
        let w = g.scale(ce, n as f64 / total_rows as f64);
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok(total.expect("nonempty"))
}

/// EMA update of the class-token center from this step's teacher logits
/// (both global views pooled): `c <- m*c + (1-m)*mean`.
pub fn update_center(center: &mut [f64], batches: &[&[f64]], momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(UkdError::Parameter(format!("center momentum {momentum} outside [0,1]")));
    }
    let k = center.len();
    let mut sum = vec![0.0; k];
    let mut rows = 0usize;
    for batch in batches {
        if k == 0 || batch.len() % k != 0 {
            return Err(UkdError::Dimension(format!(
                "teacher logits length {} not divisible by {k}",
                batch.len()
            )));
        }
        for row in batch.chunks_exact(k) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(UkdError::Dimension("center update needs at least one row".into()));
    }
    for (c, s) in center.iter_mut().zip(&sum) {
        *c = momentum * *c + (1.0 - momentum) * (s / rows as f64);
    }
    Ok(())
}
