//! Vision transformer backbone with mask-token support.
//!
//! Pre-norm ViT: patch embedding, a learned class token, learned positional
//! embeddings (bilinearly rescaled when the input grid differs from the
//! configured one), multi-head self-attention blocks with layer scale and
//! optional stochastic depth, and a final layernorm. Masked-image-modeling
//! support replaces selected patch embeddings with a learned mask token
//! before the positional embedding is added, so the pixels under a masked
//! patch never reach the network.

use crate::error::{Result, UkdError};
use crate::nn::{ParamStore, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ViTConfig {
    /// Native square input side in pixels (the positional grid is sized
    /// for this; other sides rescale the grid).
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_scale_init: f64,
    pub drop_path_rate: f64,
}

impl ViTConfig {
    /// The deploy-scale configuration: ViT-L over 14-pixel patches at 224.
    /// Construct it for shape accounting; training it is out of scope here.
    pub fn full_scale() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            layer_scale_init: 1e-5,
            drop_path_rate: 0.4,
        }
    }

    /// Desk-scale configuration used throughout tests and examples.
    pub fn toy() -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            layer_scale_init: 1.0,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(UkdError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(UkdError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(UkdError::Config("depth, channels, mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(UkdError::Config(format!(
                "drop path rate {} outside [0,1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens at native resolution (class token not counted).
    pub fn token_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Grid side for an arbitrary square input.
    pub fn grid_for(&self, image_size: usize) -> Result<usize> {
        if image_size == 0 || image_size % self.patch_size != 0 {
            return Err(UkdError::Dimension(format!(
                "input side {image_size} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(image_size / self.patch_size)
    }

    /// Flattened pixel count of one patch row.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub decay: bool,
}

/// Full parameter inventory of a backbone under `prefix`, without
/// allocating anything. This is what makes deploy-scale shape accounting
/// cheap: the ViT-L tree is ~300M elements and never needs to exist.
pub fn vit_param_specs(prefix: &str, cfg: &ViTConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let hidden = cfg.mlp_ratio * d;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: InitKind, decay: bool| {
        specs.push(ParamSpec { name, shape, init, decay });
    };
    push(format!("{prefix}.patch.w"), vec![d, cfg.patch_dim()], InitKind::TruncNormal(0.02), true);
    push(format!("{prefix}.patch.b"), vec![d], InitKind::Zeros, false);
    push(format!("{prefix}.cls"), vec![1, d], InitKind::TruncNormal(0.02), false);
    push(format!("{prefix}.mask_token"), vec![d], InitKind::TruncNormal(0.02), false);
    push(format!("{prefix}.pos_cls"), vec![1, d], InitKind::TruncNormal(0.02), false);
    push(format!("{prefix}.pos_patch"), vec![cfg.token_count(), d], InitKind::TruncNormal(0.02), false);
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blk{i}");
        push(format!("{b}.norm1.g"), vec![d], InitKind::Ones, false);
        push(format!("{b}.norm1.b"), vec![d], InitKind::Zeros, false);
        for lin in ["q", "k", "v"] {
            push(format!("{b}.attn.{lin}.w"), vec![d, d], InitKind::TruncNormal(0.02), true);
            push(format!("{b}.attn.{lin}.b"), vec![d], InitKind::Zeros, false);
        }
        push(format!("{b}.attn.proj.w"), vec![d, d], InitKind::TruncNormal(0.02), true);
        push(format!("{b}.attn.proj.b"), vec![d], InitKind::Zeros, false);
        push(format!("{b}.ls1"), vec![d], InitKind::Const(cfg.layer_scale_init), false);
        push(format!("{b}.norm2.g"), vec![d], InitKind::Ones, false);
        push(format!("{b}.norm2.b"), vec![d], InitKind::Zeros, false);
        push(format!("{b}.mlp.fc1.w"), vec![hidden, d], InitKind::TruncNormal(0.02), true);
        push(format!("{b}.mlp.fc1.b"), vec![hidden], InitKind::Zeros, false);
        push(format!("{b}.mlp.fc2.w"), vec![d, hidden], InitKind::TruncNormal(0.02), true);
        push(format!("{b}.mlp.fc2.b"), vec![d], InitKind::Zeros, false);
        push(format!("{b}.ls2"), vec![d], InitKind::Const(cfg.layer_scale_init), false);
    }
    push(format!("{prefix}.norm.g"), vec![d], InitKind::Ones, false);
    push(format!("{prefix}.norm.b"), vec![d], InitKind::Zeros, false);
    specs
}

/// Materialize the parameters listed by [`vit_param_specs`] into `store`.
pub fn init_vit(store: &mut ParamStore, prefix: &str, cfg: &ViTConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    for spec in vit_param_specs(prefix, cfg) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            InitKind::TruncNormal(std) => (0..n).map(|_| rng.trunc_normal(std)).collect(),
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Const(c) => vec![c; n],
        };
        store.add(&spec.name, &spec.shape, data, spec.decay)?;
    }
    Ok(())
}

/// A batch of square images, channel-major per image (`[b][c][y][x]`).
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Vec<f64>,
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
}

impl ImageBatch {
    pub fn new(data: Vec<f64>, batch: usize, channels: usize, size: usize) -> Result<Self> {
        if data.len() != batch * channels * size * size {
            return Err(UkdError::Dimension(format!(
                "image batch: {} values for {batch}x{channels}x{size}x{size}",
                data.len()
            )));
        }
        Ok(ImageBatch { data, batch, channels, size })
    }

    fn pixel(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.size + y) * self.size + x]
    }
}

/// Patch positions to replace with the mask token, per image.
/// Positions are strictly increasing indices into the row-major patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub positions: Vec<usize>,
}

impl MaskSpec {
    pub fn none() -> Self {
        MaskSpec { positions: Vec::new() }
    }

    fn validate(&self, tokens: usize) -> Result<()> {
        for w in self.positions.windows(2) {
            if w[0] >= w[1] {
                return Err(UkdError::Contract(
                    "mask positions must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.positions.last() {
            if last >= tokens {
                return Err(UkdError::Contract(format!(
                    "mask position {last} outside {tokens} tokens"
                )));
            }
        }
        Ok(())
    }
}

/// Draw `round(ratio * tokens)` distinct positions to mask.
pub fn sample_mask(tokens: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(UkdError::Parameter(format!("mask ratio {ratio} outside [0,1]")));
    }
    let count = (ratio * tokens as f64).round() as usize;
    let mut positions = rng.sample_distinct(tokens, count);
    positions.sort_unstable();
    Ok(MaskSpec { positions })
}

/// Backbone output: `cls` is `[batch, dim]`, `patches` is `[batch*tokens, dim]`
/// with image-major rows.
#[derive(Debug, Clone, Copy)]
pub struct TokenOutput {
    pub cls: Var,
    pub patches: Var,
    pub batch: usize,
    pub tokens: usize,
}

fn patchify(images: &ImageBatch, patch: usize) -> (Vec<f64>, usize) {
    let grid = images.size / patch;
    let pdim = patch * patch * images.channels;
    let mut rows = Vec::with_capacity(images.batch * grid * grid * pdim);
    for b in 0..images.batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..images.channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            rows.push(images.pixel(b, c, gy * patch + py, gx * patch + px));
                        }
                    }
                }
            }
        }
    }
    (rows, grid)
}

/// Run the backbone. `masks` (one [`MaskSpec`] per image) enables
/// masked-image-modeling mode. `drop_path_rng` enables stochastic depth;
/// pass `None` for evaluation or teacher forwards. With a drop-path rate of
/// zero the two modes are bit-identical.
pub fn vit_forward(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    cfg: &ViTConfig,
    images: &ImageBatch,
    masks: Option<&[MaskSpec]>,
    mut drop_path_rng: Option<&mut Rng>,
) -> Result<TokenOutput> {
    cfg.validate()?;
    if images.channels != cfg.channels {
        return Err(UkdError::Dimension(format!(
            "{} channels, backbone expects {}",
            images.channels, cfg.channels
        )));
    }
    let grid = cfg.grid_for(images.size)?;
    let t = grid * grid;
    let bsz = images.batch;
    if bsz == 0 {
        return Err(UkdError::Dimension("empty image batch".into()));
    }
    let var = |name: String| p.var(&name);

    let (rows, _) = patchify(images, cfg.patch_size);
    let px = g.constant(&[bsz * t, cfg.patch_dim()], rows);
    let pw = var(format!("{prefix}.patch.w"))?;
    let pb = var(format!("{prefix}.patch.b"))?;
    let mut tok = g.linear(px, pw, Some(pb))?;

    if let Some(masks) = masks {
        if masks.len() != bsz {
            return Err(UkdError::Dimension(format!(
                "{} mask specs for batch {bsz}",
                masks.len()
            )));
        }
        let mut flags = vec![false; bsz * t];
        for (b, spec) in masks.iter().enumerate() {
            spec.validate(t)?;
            for &pos in &spec.positions {
                flags[b * t + pos] = true;
            }
        }
        if flags.iter().any(|&f| f) {
            let token = var(format!("{prefix}.mask_token"))?;
            tok = g.mask_rows(tok, token, &flags)?;
        }
    }

    // Positional embedding, rescaled when the input grid differs.
    let pos = var(format!("{prefix}.pos_patch"))?;
    let pos = if grid == cfg.grid_side() {
        pos
    } else {
        g.bilinear_grid(pos, cfg.grid_side(), grid)?
    };
    let pos_tiled = g.concat_rows(&vec![pos; bsz])?;
    tok = g.add(tok, pos_tiled)?;

    let cls = var(format!("{prefix}.cls"))?;
    let pos_cls = var(format!("{prefix}.pos_cls"))?;
    let cls = g.add(cls, pos_cls)?;
    let cls_tiled = g.concat_rows(&vec![cls; bsz])?;

    // Interleave to image-major sequences: row b*(t+1) is image b's class
    // token, followed by its patches.
    let packed = g.concat_rows(&[cls_tiled, tok])?;
    let s = t + 1;
    let mut perm = Vec::with_capacity(bsz * s);
    for b in 0..bsz {
        perm.push(b);
        for i in 0..t {
            perm.push(bsz + b * t + i);
        }
    }
    let mut x = g.select_rows(packed, &perm)?;

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for i in 0..cfg.depth {
        let blk = format!("{prefix}.blk{i}");

        let n1g = var(format!("{blk}.norm1.g"))?;
        let n1b = var(format!("{blk}.norm1.b"))?;
        let n1 = g.layernorm(x, n1g, n1b, LN_EPS)?;
        let q = {
            let w = var(format!("{blk}.attn.q.w"))?;
            let b = var(format!("{blk}.attn.q.b"))?;
            g.linear(n1, w, Some(b))?
        };
        let k = {
            let w = var(format!("{blk}.attn.k.w"))?;
            let b = var(format!("{blk}.attn.k.b"))?;
            g.linear(n1, w, Some(b))?
        };
        let v = {
            let w = var(format!("{blk}.attn.v.w"))?;
            let b = var(format!("{blk}.attn.v.b"))?;
            g.linear(n1, w, Some(b))?
        };
        let qh = g.split_heads(q, bsz, s, cfg.heads)?;
        let kh = g.split_heads(k, bsz, s, cfg.heads)?;
        let vh = g.split_heads(v, bsz, s, cfg.heads)?;
        let qs = g.scale(qh, scale);
        let att = g.bmm_nt(qs, kh)?;
        let att = g.softmax(att, 2, 1.0)?;
        let ctx = g.bmm(att, vh)?;
        let ctx = g.merge_heads(ctx, bsz, cfg.heads)?;
        let pw = var(format!("{blk}.attn.proj.w"))?;
        let pb = var(format!("{blk}.attn.proj.b"))?;
        let mut branch = g.linear(ctx, pw, Some(pb))?;
        let ls1 = var(format!("{blk}.ls1"))?;
        branch = g.mul_bias(branch, ls1)?;
        branch = drop_path(g, branch, cfg.drop_path_rate, bsz, s, &mut drop_path_rng)?;
        x = g.add(x, branch)?;

        let n2g = var(format!("{blk}.norm2.g"))?;
        let n2b = var(format!("{blk}.norm2.b"))?;
        let n2 = g.layernorm(x, n2g, n2b, LN_EPS)?;
        let f1w = var(format!("{blk}.mlp.fc1.w"))?;
        let f1b = var(format!("{blk}.mlp.fc1.b"))?;
        let h = g.linear(n2, f1w, Some(f1b))?;
        let h = g.gelu(h);
        let f2w = var(format!("{blk}.mlp.fc2.w"))?;
        let f2b = var(format!("{blk}.mlp.fc2.b"))?;
        let mut branch = g.linear(h, f2w, Some(f2b))?;
        let ls2 = var(format!("{blk}.ls2"))?;
        branch = g.mul_bias(branch, ls2)?;
        branch = drop_path(g, branch, cfg.drop_path_rate, bsz, s, &mut drop_path_rng)?;
        x = g.add(x, branch)?;
    }

    let ng = var(format!("{prefix}.norm.g"))?;
    let nb = var(format!("{prefix}.norm.b"))?;
    let x = g.layernorm(x, ng, nb, LN_EPS)?;

    let cls_idx: Vec<usize> = (0..bsz).map(|b| b * s).collect();
    let patch_idx: Vec<usize> =
        (0..bsz).flat_map(|b| (1..s).map(move |i| b * s + i)).collect();
    let cls_out = g.select_rows(x, &cls_idx)?;
    let patch_out = g.select_rows(x, &patch_idx)?;
    Ok(TokenOutput { cls: cls_out, patches: patch_out, batch: bsz, tokens: t })
}

/// Stochastic depth on a residual branch: drop whole images with
/// probability `rate`, scaling survivors by `1/(1-rate)`.
fn drop_path(
    g: &mut Graph,
    branch: Var,
    rate: f64,
    bsz: usize,
    seq: usize,
    rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    let rng = match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => r,
        _ => return Ok(branch),
    };
    let keep = 1.0 - rate;
    let mut scales = Vec::with_capacity(bsz * seq);
    for _ in 0..bsz {
        let f = if rng.bernoulli(rate) { 0.0 } else { 1.0 / keep };
        scales.extend(std::iter::repeat(f).take(seq));
    }
    g.scale_rows(branch, &scales)
}
