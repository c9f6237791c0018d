//! The pretraining engine: one student backbone trained jointly against an
//! EMA teacher (class-token and masked-patch self-distillation) and a set
//! of frozen external experts, with warmup-plus-cosine learning rate decay,
//! AdamW, and bitwise-resumable checkpoints.
//!
//! All persistent state (parameters, optimizer moments, the center vector)
//! is quantized through `f32` after construction and after every step, so
//! the `f32` checkpoint payload is lossless and a resumed run replays the
//! exact byte-for-byte trajectory of an uninterrupted one.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{init_vit, vit_forward, ImageBatch, TokenOutput, ViTConfig};
use crate::error::{Result, UkdError};
use crate::expert::{
    expert_loss, init_adapters, total_pretrain_loss, DistillWeights, LossWeights, TeacherFeed,
    TeacherProvider, TeacherRole, TeacherTokens,
};
use crate::nn::{AdamHp, ParamStore};
use crate::rng::Rng;
use crate::selfdistill::{
    dino_loss, head_forward, ibot_loss, init_head, make_views, update_center, CropConfig,
    DinoLossInputs, HeadConfig, IbotLossInputs,
};
use crate::tensor::vmath::cosine_similarity;
use crate::tensor::Graph;

// ── Learning rate schedule ──────────────────────────────────────────────

/// Linear warmup from zero to `base_lr`, cosine decay to `min_lr`, then a
/// hold at `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.min_lr.is_finite()) {
            return Err(UkdError::Parameter("learning rates must be finite".into()));
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(UkdError::Parameter(format!(
                "need 0 <= min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(UkdError::Parameter(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// The learning rate for a 0-based step index. Endpoints are exact: step 0
/// gives 0.0 (when warmup is nonzero), step `warmup_steps` gives `base_lr`
/// bit-for-bit, and every step at or past `total_steps` gives `min_lr`.
pub fn lr_at(s: &ScheduleConfig, step: u64) -> f64 {
    if step >= s.total_steps {
        return s.min_lr;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    if step == s.warmup_steps {
        return s.base_lr;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub crops: CropConfig,
    pub head: HeadConfig,
    pub distill: DistillWeights,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub adam: AdamHp,
    pub batch_size: usize,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    /// The deploy-scale recipe: ViT-L/14 at 224 px, batch 1536, base rate
    /// 4e-4 decayed to 1e-6 over 500k steps after 50k warmup, teacher
    /// momentum 0.992, gradient clip 3.0.
    pub fn paper_fullscale() -> Self {
        TrainConfig {
            vit: ViTConfig::full_scale(),
            crops: CropConfig::full_scale(),
            head: HeadConfig { in_dim: 1024, hidden: 2048, bottleneck: 256, prototypes: 65536 },
            distill: DistillWeights::paper_defaults(),
            loss: LossWeights::default(),
            schedule: ScheduleConfig {
                base_lr: 4e-4,
                min_lr: 1e-6,
                warmup_steps: 50_000,
                total_steps: 500_000,
            },
            adam: AdamHp::default(),
            batch_size: 1536,
            teacher_momentum: 0.992,
            center_momentum: 0.9,
            tau_student: 0.1,
            tau_teacher: 0.04,
            grad_clip: 3.0,
        }
    }

    /// A desk-scale recipe over 16 px images: tiny backbone, batch 32, a
    /// hundred warmup steps out of a thousand.
    pub fn toy() -> Self {
        TrainConfig {
            vit: ViTConfig::toy(),
            crops: CropConfig::toy(),
            head: HeadConfig::toy(32),
            distill: DistillWeights::paper_defaults(),
            loss: LossWeights::default(),
            schedule: ScheduleConfig {
                base_lr: 1e-3,
                min_lr: 1e-5,
                warmup_steps: 100,
                total_steps: 1000,
            },
            adam: AdamHp::default(),
            batch_size: 32,
            teacher_momentum: 0.992,
            center_momentum: 0.9,
            tau_student: 0.1,
            tau_teacher: 0.04,
            grad_clip: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.schedule.validate()?;
        self.distill.validate()?;
        if self.head.in_dim != self.vit.dim {
            return Err(UkdError::Config(format!(
                "head input {} does not match backbone dim {}",
                self.head.in_dim, self.vit.dim
            )));
        }
        if self.batch_size == 0 {
            return Err(UkdError::Parameter("batch size must be positive".into()));
        }
        for (name, v) in
            [("teacher_momentum", self.teacher_momentum), ("center_momentum", self.center_momentum)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(UkdError::Parameter(format!("{name} {v} outside [0,1]")));
            }
        }
        for (name, v) in [("tau_student", self.tau_student), ("tau_teacher", self.tau_teacher)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(UkdError::Parameter(format!("{name} {v} must be positive")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(UkdError::Parameter(format!("grad clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────

/// Per-step telemetry, serialized as one JSON line by the command front end.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    /// 0-based index of the step just completed.
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub dino: f64,
    pub ibot: f64,
    pub expert: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    /// Backbone, both projection heads, and the expert adapters.
    pub student: ParamStore,
    /// EMA copy of the backbone and heads only; adapters are student-side.
    pub teacher: ParamStore,
    /// Running mean of teacher class logits, subtracted before the teacher
    /// softmax in the class-token loss.
    pub center: Vec<f64>,
    pub rng: Rng,
    pub step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

const BACKBONE: &str = "backbone";
const CLS_HEAD: &str = "head.cls";
const PATCH_HEAD: &str = "head.patch";
const ADAPTER: &str = "adapter";

impl Trainer {
    /// Fresh student and teacher with identical weights. `teachers` lists
    /// the expert roles that will be fed during training together with
    /// their token dimensions (adapter shapes depend on them).
    pub fn new(cfg: TrainConfig, seed: u64, teachers: &[(TeacherRole, usize)]) -> Result<Trainer> {
        cfg.validate()?;
        for role in TeacherRole::all() {
            let active = cfg.distill.cls_weight(role) > 0.0 || cfg.distill.patch_weight(role) > 0.0;
            if active && !teachers.iter().any(|(r, _)| *r == role) {
                return Err(UkdError::Config(format!(
                    "teacher '{}' has nonzero weight but no declared dimension",
                    role.tag()
                )));
            }
        }
        let mut rng = Rng::new(seed);
        let mut student = ParamStore::new();
        init_vit(&mut student, BACKBONE, &cfg.vit, &mut rng)?;
        init_head(&mut student, CLS_HEAD, &cfg.head, &mut rng)?;
        init_head(&mut student, PATCH_HEAD, &cfg.head, &mut rng)?;
        init_adapters(&mut student, ADAPTER, cfg.vit.dim, teachers, &mut rng)?;
        let mut teacher = ParamStore::new();
        for e in student.entries() {
            if !e.name.starts_with(ADAPTER) {
                teacher.add(&e.name, &e.shape, e.data.clone(), e.decay)?;
            }
        }
        student.round_to_f32();
        teacher.round_to_f32();
        let center = vec![0.0; cfg.head.prototypes];
        Ok(Trainer { cfg, student, teacher, center, rng, step: 0, last_checkpoint: None })
    }

    /// One optimization step over a uniformly sampled batch. Teacher
    /// tokens for the expert term come from `providers`; roles with zero
    /// weight may be omitted.
    pub fn train_step(
        &mut self,
        dataset: &ImageBatch,
        providers: &[(TeacherRole, &dyn TeacherProvider)],
    ) -> Result<StepLog> {
        let step = self.step;
        let indices: Vec<usize> =
            (0..self.cfg.batch_size).map(|_| self.rng.below_usize(dataset.batch)).collect();
        let batch = gather(dataset, &indices)?;
        let global_grid = self.cfg.vit.grid_for(self.cfg.crops.global_size)?;
        let views =
            make_views(&batch, &self.cfg.crops, global_grid * global_grid, &mut self.rng)?;

        let mut g = Graph::new();

        // Teacher pass: unmasked global views, no gradients.
        let tp = self.teacher.bind(&mut g, false);
        let mut t_cls_logits: Vec<Vec<f64>> = Vec::with_capacity(2);
        let mut t_patch_logits: Vec<Vec<f64>> = Vec::with_capacity(2);
        for v in 0..2 {
            let out = vit_forward(&mut g, &tp, BACKBONE, &self.cfg.vit, &views.globals[v], None, None)?;
            let cls = head_forward(&mut g, &tp, CLS_HEAD, &self.cfg.head, out.cls)?;
            let patch = head_forward(&mut g, &tp, PATCH_HEAD, &self.cfg.head, out.patches)?;
            t_cls_logits.push(g.values(cls).to_vec());
            t_patch_logits.push(g.values(patch).to_vec());
        }

        // Student passes: masked globals feed the self-distillation losses,
        // unmasked globals feed the expert term, locals add class views.
        let sp = self.student.bind(&mut g, true);
        let drop = self.cfg.vit.drop_path_rate > 0.0;
        let mut s_cls_logits = Vec::new();
        let mut s_patch_logits = Vec::new();
        for v in 0..2 {
            let out = vit_forward(
                &mut g,
                &sp,
                BACKBONE,
                &self.cfg.vit,
                &views.globals[v],
                Some(&views.masks[v]),
                if drop { Some(&mut self.rng) } else { None },
            )?;
            s_cls_logits.push(head_forward(&mut g, &sp, CLS_HEAD, &self.cfg.head, out.cls)?);
            s_patch_logits.push(head_forward(&mut g, &sp, PATCH_HEAD, &self.cfg.head, out.patches)?);
        }
        for local in &views.locals {
            let out = vit_forward(
                &mut g,
                &sp,
                BACKBONE,
                &self.cfg.vit,
                local,
                None,
                if drop { Some(&mut self.rng) } else { None },
            )?;
            s_cls_logits.push(head_forward(&mut g, &sp, CLS_HEAD, &self.cfg.head, out.cls)?);
        }
        let mut s_plain: Vec<TokenOutput> = Vec::with_capacity(2);
        for v in 0..2 {
            s_plain.push(vit_forward(
                &mut g,
                &sp,
                BACKBONE,
                &self.cfg.vit,
                &views.globals[v],
                None,
                if drop { Some(&mut self.rng) } else { None },
            )?);
        }

        let dino = dino_loss(
            &mut g,
            &DinoLossInputs {
                teacher_cls_logits: [&t_cls_logits[0], &t_cls_logits[1]],
                student_cls_logits: &s_cls_logits,
                center: &self.center,
                tau_teacher: self.cfg.tau_teacher,
                tau_student: self.cfg.tau_student,
            },
        )?;
        let ibot = ibot_loss(
            &mut g,
            &IbotLossInputs {
                teacher_patch_logits: [&t_patch_logits[0], &t_patch_logits[1]],
                student_patch_logits: [s_patch_logits[0], s_patch_logits[1]],
                masks: &views.masks,
                tokens: global_grid * global_grid,
                tau_teacher: self.cfg.tau_teacher,
                tau_student: self.cfg.tau_student,
            },
        )?;

        let rows: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
        let mut expert_tokens: Vec<(TeacherRole, [TeacherTokens; 2])> = Vec::new();
        for (role, provider) in providers {
            let t0 = provider.tokens(&views.globals[0], &rows, 0)?;
            let t1 = provider.tokens(&views.globals[1], &rows, 1)?;
            expert_tokens.push((*role, [t0, t1]));
        }
        let feeds: Vec<TeacherFeed> = expert_tokens
            .iter()
            .map(|(role, views)| TeacherFeed { role: *role, views: [&views[0], &views[1]] })
            .collect();
        let expert = expert_loss(
            &mut g,
            &sp,
            ADAPTER,
            &[s_plain[0], s_plain[1]],
            &feeds,
            &self.cfg.distill,
        )?;

        let loss = total_pretrain_loss(&mut g, dino, ibot, expert, &self.cfg.loss)
            .map_err(|e| self.abort(e, step))?;
        g.backward(loss.total)?;

        let lr = lr_at(&self.cfg.schedule, step);
        let grad_norm =
            self.student.adamw_step(&g, &sp, &self.cfg.adam, lr, self.cfg.grad_clip, step + 1)?;
        if !grad_norm.is_finite() {
            return Err(self.abort(UkdError::Degenerate("gradient norm is not finite".into()), step));
        }

        self.teacher.ema_from(&self.student, self.cfg.teacher_momentum)?;
        update_center(
            &mut self.center,
            &[&t_cls_logits[0], &t_cls_logits[1]],
            self.cfg.center_momentum,
        )?;
        self.student.round_to_f32();
        self.teacher.round_to_f32();
        for c in self.center.iter_mut() {
            *c = *c as f32 as f64;
        }
        self.step += 1;

        Ok(StepLog {
            step,
            lr,
            total: g.scalar_value(loss.total),
            dino: loss.dino,
            ibot: loss.ibot,
            expert: loss.expert,
            grad_norm,
        })
    }

    fn abort(&self, err: UkdError, step: u64) -> UkdError {
        let component = match &err {
            UkdError::Degenerate(msg) => {
                msg.split_whitespace().next().unwrap_or("loss").to_string()
            }
            other => other.kind().to_string(),
        };
        match err {
            UkdError::Degenerate(_) => UkdError::TrainingAborted {
                component,
                step,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            other => other,
        }
    }

    /// Mean cosine similarity between the adapter-projected student class
    /// token and one expert's class token over the given dataset rows,
    /// using each raw image as a single unaugmented view.
    pub fn alignment_probe(
        &self,
        dataset: &ImageBatch,
        indices: &[usize],
        role: TeacherRole,
        provider: &dyn TeacherProvider,
    ) -> Result<f64> {
        if indices.is_empty() {
            return Err(UkdError::Dimension("alignment probe needs at least one image".into()));
        }
        let batch = gather(dataset, indices)?;
        let mut g = Graph::new();
        let sp = self.student.bind(&mut g, false);
        let out = vit_forward(&mut g, &sp, BACKBONE, &self.cfg.vit, &batch, None, None)?;
        let aw = sp.var(&format!("{ADAPTER}.{}.cls.w", role.tag()))?;
        let proj = g.matmul_nt(out.cls, aw)?;
        let rows: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
        let teacher = provider.tokens(&batch, &rows, 0)?;
        let dim = teacher.dim;
        let values = g.values(proj);
        let mut total = 0.0;
        for (i, trow) in teacher.cls.chunks(dim).enumerate() {
            total += cosine_similarity(&values[i * dim..(i + 1) * dim], trow)?;
        }
        Ok(total / indices.len() as f64)
    }

    /// Embed every image with the student or the EMA-teacher weights,
    /// returning one row per image: the class token, followed by the full
    /// patch grid row-major when `with_patches` is set. The row stride is
    /// therefore `dim` or `dim * (1 + grid^2)`.
    pub fn encode(
        &self,
        images: &ImageBatch,
        use_teacher: bool,
        with_patches: bool,
    ) -> Result<Vec<f64>> {
        let store = if use_teacher { &self.teacher } else { &self.student };
        let dim = self.cfg.vit.dim;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let out = vit_forward(&mut g, &p, BACKBONE, &self.cfg.vit, images, None, None)?;
        let cls = g.values(out.cls).to_vec();
        if !with_patches {
            return Ok(cls);
        }
        let patches = g.values(out.patches);
        let mut rows = Vec::with_capacity(images.batch * dim * (1 + out.tokens));
        for b in 0..images.batch {
            rows.extend_from_slice(&cls[b * dim..(b + 1) * dim]);
            let start = b * out.tokens * dim;
            rows.extend_from_slice(&patches[start..start + out.tokens * dim]);
        }
        Ok(rows)
    }

    // ── Checkpointing ──

    /// Write the full training state and remember the path for abort
    /// reports. Safe to reload with [`Trainer::load`] for a bitwise resume.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut body = Vec::new();
        body.extend_from_slice(CKPT_MAGIC);
        let records = 3 + 4 * self.student.entries().len() + 2 * self.teacher.entries().len();
        body.extend((records as u64).to_le_bytes());
        push_record(&mut body, "meta.step", &[4], &u64_limbs(self.step));
        let (key, counter) = self.rng.state();
        let mut rng_limbs = u64_limbs(key).to_vec();
        rng_limbs.extend(u64_limbs(counter));
        push_record(&mut body, "meta.rng", &[8], &rng_limbs);
        let center: Vec<f32> = self.center.iter().map(|&v| v as f32).collect();
        push_record(&mut body, "center", &[center.len()], &center);
        for e in self.student.entries() {
            let name = &e.name;
            push_record(&mut body, &format!("s.{name}.data"), &e.shape, &to_f32(&e.data));
            push_record(&mut body, &format!("s.{name}.m"), &e.shape, &to_f32(&e.m));
            push_record(&mut body, &format!("s.{name}.v"), &e.shape, &to_f32(&e.v));
            push_record(&mut body, &format!("s.{name}.decay"), &[1], &[e.decay as u8 as f32]);
        }
        for e in self.teacher.entries() {
            let name = &e.name;
            push_record(&mut body, &format!("t.{name}.data"), &e.shape, &to_f32(&e.data));
            push_record(&mut body, &format!("t.{name}.decay"), &[1], &[e.decay as u8 as f32]);
        }
        let crc = crc32fast::hash(&body);
        body.extend(crc.to_le_bytes());
        fs::write(path, &body)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint. The config is not stored in
    /// the file; the caller supplies the same one used for the original
    /// run (a center length mismatch is caught here, other disagreements
    /// surface as dimension errors on the next step).
    pub fn load(path: &Path, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let raw = fs::read(path)?;
        if raw.len() < CKPT_MAGIC.len() + 12 {
            return Err(UkdError::Corrupt("checkpoint truncated".into()));
        }
        if &raw[..7] != b"UKDCKPT" {
            return Err(UkdError::Corrupt("not a checkpoint file".into()));
        }
        if raw[7] != CKPT_MAGIC[7] {
            return Err(UkdError::VersionMismatch(format!(
                "checkpoint version '{}', this build reads '1'",
                raw[7] as char
            )));
        }
        let body = &raw[..raw.len() - 4];
        let stored = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(UkdError::Corrupt("checkpoint CRC mismatch".into()));
        }
        let mut cur = Cursor { buf: body, pos: CKPT_MAGIC.len() };
        let count = cur.take_u64()? as usize;
        let mut order: Vec<Record> = Vec::with_capacity(count);
        for _ in 0..count {
            order.push(cur.take_record()?);
        }
        if cur.pos != body.len() {
            return Err(UkdError::Corrupt("trailing bytes after final record".into()));
        }
        let index: HashMap<&str, usize> =
            order.iter().enumerate().map(|(i, r)| (r.name.as_str(), i)).collect();
        let get = |name: &str| -> Result<&Record> {
            index
                .get(name)
                .map(|&i| &order[i])
                .ok_or_else(|| UkdError::Corrupt(format!("checkpoint missing record '{name}'")))
        };

        let step = limbs_u64(&get("meta.step")?.vals)?;
        let rng_rec = get("meta.rng")?;
        if rng_rec.vals.len() != 8 {
            return Err(UkdError::Corrupt("rng record must hold 8 limbs".into()));
        }
        let key = limbs_u64(&rng_rec.vals[..4])?;
        let counter = limbs_u64(&rng_rec.vals[4..])?;
        let center: Vec<f64> = get("center")?.vals.iter().map(|&v| v as f64).collect();
        if center.len() != cfg.head.prototypes {
            return Err(UkdError::Config(format!(
                "checkpoint center has {} prototypes, config expects {}",
                center.len(),
                cfg.head.prototypes
            )));
        }

        let mut student = ParamStore::new();
        let mut teacher = ParamStore::new();
        for rec in &order {
            let (store, name) = if let Some(rest) = rec.name.strip_prefix("s.") {
                (&mut student, rest)
            } else if let Some(rest) = rec.name.strip_prefix("t.") {
                (&mut teacher, rest)
            } else {
                continue;
            };
            let Some(name) = name.strip_suffix(".data") else { continue };
            let decay_rec = get(&format!("{}.decay", &rec.name[..rec.name.len() - 5]))?;
            let decay = decay_rec.vals.first().copied().unwrap_or(0.0) != 0.0;
            store.add(name, &rec.shape, rec.vals.iter().map(|&v| v as f64).collect(), decay)?;
        }
        for e in student.entries_mut() {
            let m = get(&format!("s.{}.m", e.name))?;
            let v = get(&format!("s.{}.v", e.name))?;
            if m.vals.len() != e.data.len() || v.vals.len() != e.data.len() {
                return Err(UkdError::Corrupt(format!("moment size mismatch for '{}'", e.name)));
            }
            e.m = m.vals.iter().map(|&x| x as f64).collect();
            e.v = v.vals.iter().map(|&x| x as f64).collect();
        }
        Ok(Trainer {
            cfg,
            student,
            teacher,
            center,
            rng: Rng::from_state(key, counter),
            step,
            last_checkpoint: Some(path.to_path_buf()),
        })
    }
}

/// Copy the listed images out of a dataset batch.
pub fn gather(dataset: &ImageBatch, indices: &[usize]) -> Result<ImageBatch> {
    let per = dataset.channels * dataset.size * dataset.size;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= dataset.batch {
            return Err(UkdError::Dimension(format!(
                "image index {i} out of range for {} images",
                dataset.batch
            )));
        }
        data.extend_from_slice(&dataset.data[i * per..(i + 1) * per]);
    }
    ImageBatch::new(data, indices.len(), dataset.channels, dataset.size)
}

// ── Checkpoint byte format ──────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"UKDCKPT1";

struct Record {
    name: String,
    shape: Vec<usize>,
    vals: Vec<f32>,
}

fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&v| v as f32).collect()
}

/// A `u64` as four 16-bit limbs, least significant first; each limb is
/// exactly representable as `f32`.
fn u64_limbs(x: u64) -> [f32; 4] {
    [
        (x & 0xFFFF) as f32,
        ((x >> 16) & 0xFFFF) as f32,
        ((x >> 32) & 0xFFFF) as f32,
        ((x >> 48) & 0xFFFF) as f32,
    ]
}

fn limbs_u64(limbs: &[f32]) -> Result<u64> {
    if limbs.len() != 4 {
        return Err(UkdError::Corrupt(format!("{} limbs for a u64", limbs.len())));
    }
    let mut out: u64 = 0;
    for (i, &l) in limbs.iter().enumerate() {
        if !(0.0..=65535.0).contains(&l) || l.fract() != 0.0 {
            return Err(UkdError::Corrupt(format!("limb {l} is not a 16-bit integer")));
        }
        out |= (l as u64) << (16 * i);
    }
    Ok(out)
}

// Record layout, all integers little-endian u64: name length, name bytes
// (UTF-8), rank, one dim per rank, then the f32 payload (dims product).
fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], vals: &[f32]) {
    debug_assert_eq!(shape.iter().product::<usize>(), vals.len());
    buf.extend((name.len() as u64).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u64).to_le_bytes());
    for &d in shape {
        buf.extend((d as u64).to_le_bytes());
    }
    for &v in vals {
        buf.extend(v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(UkdError::Corrupt("checkpoint truncated mid-record".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A bounded u64, guarding `as usize` casts against absurd lengths in a
    /// damaged file before any allocation happens.
    fn take_len(&mut self, what: &str) -> Result<usize> {
        let v = self.take_u64()?;
        if v > self.buf.len() as u64 {
            return Err(UkdError::Corrupt(format!("{what} of {v} exceeds the file size")));
        }
        Ok(v as usize)
    }

    fn take_record(&mut self) -> Result<Record> {
        let name_len = self.take_len("record name length")?;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| UkdError::Corrupt("record name is not UTF-8".into()))?
            .to_string();
        let ndim = self.take_len("record rank")?;
        if ndim > 8 {
            return Err(UkdError::Corrupt(format!("record '{name}' claims rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.take_len("record dim")?;
            shape.push(d);
            count = count
                .checked_mul(d)
                .filter(|&c| c <= self.buf.len())
                .ok_or_else(|| UkdError::Corrupt(format!("record '{name}' dims overflow")))?;
        }
        let raw = self.take(count * 4)?;
        let vals = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Record { name, shape, vals })
    }
}
