//! Command-line surface: nine subcommands tying the library into
//! reproducible runs. Every randomized path takes an explicit --seed, all
//! primary outputs are deterministic JSON (stdout or --out), human logs go
//! to stderr, and existing files are never clobbered without --force.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::backbone::ImageBatch;
use crate::error::{Result, UkdError};
use crate::eval::{
    abmil::{abmil_predict, abmil_risk},
    acc_at_k, assign_bin, bin_survival_times, stratified_split, train_abmil,
    train_abmil_survival, train_linear_probe, AbmilConfig, FeatureBag, LinearProbeConfig,
    Normalization, ProbeData, RetrievalIndex, SurvivalRecord, N_BINS,
};
use crate::eval::c_index;
use crate::eval::probe::probe_predict;
use crate::expert::{FeatureFileTeacher, FrozenRandomNetwork, TeacherProvider, TeacherRole};
use crate::io::{read_manifest, write_manifest, FeatureStore, ManifestEntry, RunConfig};
use crate::pretrain::{gather, TrainConfig, Trainer};
use crate::stats::{
    auc_binary, auc_macro_ovr, balanced_accuracy, bootstrap, compare_models, read_rank_csv,
    weighted_f1, wilcoxon_signed_rank, Alternative,
};
use crate::synth;

#[derive(Parser)]
#[command(
    name = "ukd",
    version,
    about = "Self-distillation pretraining with expert teachers, plus the downstream evaluation harness"
)]
struct Cli {
    /// Worker threads for parallel sections; falls back to UKD_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset on disk.
    Gen(GenArgs),
    /// Run self-distillation pretraining with expert teachers.
    Pretrain(PretrainArgs),
    /// Embed images with a trained checkpoint into a feature store.
    Extract(ExtractArgs),
    /// Train and score a linear probe on stored features.
    Probe(ProbeArgs),
    /// Train and score gated-attention MIL on feature bags.
    Mil(MilArgs),
    /// Train discrete-time survival MIL and report the C-index.
    Survival(SurvivalArgs),
    /// Nearest-neighbor retrieval accuracy on stored features.
    Retrieve(RetrieveArgs),
    /// Bootstrap intervals and paired tests over a score matrix.
    Stats(StatsArgs),
    /// Average ranks and the critical difference over a score matrix.
    Rank(RankArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run config supplying defaults for the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite outputs that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// One of: pretrain_textures, mil_bags, survival, clusters.
    #[arg(long)]
    kind: Option<String>,
    /// Datasets land at <prefix>.feat and <prefix>.manifest.jsonl.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images (textures) or bags (mil_bags, survival).
    #[arg(long)]
    count: Option<usize>,
    /// Image side in pixels (textures).
    #[arg(long)]
    size: Option<usize>,
    /// Feature dimension (mil_bags, survival, clusters).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_instances: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
    /// Probability that a bag is positive (mil_bags).
    #[arg(long)]
    signal_rate: Option<f64>,
    /// Blob count (clusters).
    #[arg(long)]
    classes: Option<usize>,
    /// Points per blob (clusters).
    #[arg(long)]
    per_class: Option<usize>,
    /// Blob standard deviation (clusters).
    #[arg(long)]
    spread: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// "toy" or "paper-fullscale".
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoint, step log, and resolved config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Image feature store; without it the toy texture set is generated
    /// in memory from the seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Steps to run in this invocation (default: the rest of the schedule).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Also save intermediate checkpoints every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a saved checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the preset's hyperparameter table and exit.
    #[arg(long)]
    dry_run: bool,
    /// Expert feature files (rows of CLS + patch grid per view).
    #[arg(long)]
    teacher_a: Option<PathBuf>,
    #[arg(long)]
    teacher_b: Option<PathBuf>,
    #[arg(long)]
    teacher_c: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Preset naming the architecture the checkpoint was trained with.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Features land at <prefix>.feat and <prefix>.manifest.jsonl.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// Write CLS plus the full patch grid per row, the layout the expert
    /// feature-file teacher expects.
    #[arg(long)]
    teacher_mode: bool,
    /// Use the EMA-teacher weights instead of the student.
    #[arg(long)]
    ema: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct MilArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Only "paper-abmil" is defined.
    #[arg(long, default_value = "paper-abmil")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SurvivalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "paper-abmil")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// "zscore" or "minmax".
    #[arg(long)]
    norm: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Fraction of rows held out as queries.
    #[arg(long)]
    query_fraction: Option<f64>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    /// Score matrix CSV: header row of task names, one row per model.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Two model names, comma-separated, for a paired Wilcoxon test.
    #[arg(long)]
    pair: Option<String>,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
}

/// Parse arguments, run the selected pipeline, and return the process
/// exit code. Domain failures print a structured error object on stdout
/// and a human line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(argv);
    let threads = cli.threads.or_else(|| {
        std::env::var("UKD_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n > 0 {
            // A failure here means a pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let outcome = match &cli.cmd {
        Cmd::Gen(a) => dispatch(&a.common, |c| cmd_gen(a, c)),
        Cmd::Pretrain(a) => dispatch(&a.common, |c| cmd_pretrain(a, c)),
        Cmd::Extract(a) => dispatch(&a.common, |c| cmd_extract(a, c)),
        Cmd::Probe(a) => dispatch(&a.common, |c| cmd_probe(a, c)),
        Cmd::Mil(a) => dispatch(&a.common, |c| cmd_mil(a, c)),
        Cmd::Survival(a) => dispatch(&a.common, |c| cmd_survival(a, c)),
        Cmd::Retrieve(a) => dispatch(&a.common, |c| cmd_retrieve(a, c)),
        Cmd::Stats(a) => dispatch(&a.common, |c| cmd_stats(a, c)),
        Cmd::Rank(a) => dispatch(&a.common, |c| cmd_rank(a, c)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let obj = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            println!("{obj}");
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch<F>(common: &Common, f: F) -> Result<()>
where
    F: FnOnce(&RunConfig) -> Result<Value>,
{
    let cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        guard_overwrite(out, common.force)?;
    }
    let value = f(&cfg)?;
    let text = format!("{value}\n");
    match &common.out {
        Some(out) => fs::write(out, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(UkdError::Config(format!(
            "refusing to overwrite existing {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| UkdError::Config(format!("missing required {what}")))
}

fn require_seed(v: Option<u64>) -> Result<u64> {
    v.ok_or_else(|| {
        UkdError::Config("this pipeline is randomized; pass an explicit --seed".into())
    })
}

fn check_module(cfg: &RunConfig, invoked: &str) -> Result<()> {
    if let Some(m) = &cfg.module {
        if m != invoked {
            return Err(UkdError::Config(format!(
                "run config is for module '{m}' but '{invoked}' was invoked"
            )));
        }
    }
    Ok(())
}

// ── Shared data plumbing ──

fn read_features(data: &Path, manifest: &Path) -> Result<(FeatureStore, Vec<ManifestEntry>)> {
    let store = FeatureStore::read(data)?;
    let entries = read_manifest(manifest)?;
    crate::io::validate_manifest(&entries, store.count())?;
    Ok((store, entries))
}

fn entry_labels(entries: &[ManifestEntry]) -> Result<Vec<usize>> {
    entries
        .iter()
        .map(|e| match e.label {
            Some(l) if l >= 0 => Ok(l as usize),
            Some(l) => Err(UkdError::Parameter(format!("entry {} has negative label {l}", e.id))),
            None => Err(UkdError::Config(format!("entry {} has no label", e.id))),
        })
        .collect()
}

fn gather_rows(store: &FeatureStore, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * store.dim());
    for &i in indices {
        out.extend(store.row_f64(i)?);
    }
    Ok(out)
}

struct BagGroup {
    name: String,
    label: Option<i64>,
    time: Option<f64>,
    event: Option<bool>,
    rows: Vec<usize>,
}

/// Group manifest rows into bags by `bag_id`, in order of first
/// appearance. Annotations must agree across a bag's rows.
fn group_bags(entries: &[ManifestEntry]) -> Result<Vec<BagGroup>> {
    let mut order: Vec<BagGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for e in entries {
        let bag = e.bag_id.as_ref().ok_or_else(|| {
            UkdError::Config(format!("entry {} has no bag_id; bag pipelines need one", e.id))
        })?;
        let pos = match index.get(bag) {
            Some(&p) => p,
            None => {
                index.insert(bag.clone(), order.len());
                order.push(BagGroup {
                    name: bag.clone(),
                    label: e.label,
                    time: e.time,
                    event: e.event,
                    rows: Vec::new(),
                });
                order.len() - 1
            }
        };
        let g = &mut order[pos];
        if g.label != e.label || g.time != e.time || g.event != e.event {
            return Err(UkdError::Config(format!(
                "bag {bag} has conflicting annotations across its rows"
            )));
        }
        g.rows.push(e.row_index as usize);
    }
    Ok(order)
}

fn bags_to_features(store: &FeatureStore, groups: &[BagGroup]) -> Result<Vec<FeatureBag>> {
    groups
        .iter()
        .enumerate()
        .map(|(i, grp)| FeatureBag::new(i as u64, store.dim(), gather_rows(store, &grp.rows)?))
        .collect()
}

fn pick<T: Clone>(flag: &Option<T>, cfg: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| cfg.clone())
}

fn select<T: Copy>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}

// ── gen ──

fn cmd_gen(a: &GenArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "gen")?;
    let kind = require(pick(&a.kind, &cfg.gen.kind), "--kind")?;
    let prefix = require(pick(&a.out_prefix, &cfg.paths.out), "--out-prefix")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let store_path = prefix.with_extension("feat");
    let manifest_path = prefix.with_extension("manifest.jsonl");
    guard_overwrite(&store_path, a.common.force)?;
    guard_overwrite(&manifest_path, a.common.force)?;
    if let Some(dir) = store_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }

    let mut store;
    let mut entries = Vec::new();
    let detail;
    match kind.as_str() {
        "pretrain_textures" => {
            let count = select(a.count, cfg.gen.count, 1000);
            let size = select(a.size, cfg.gen.size, 16);
            let ds = synth::pretrain_textures(count, size, seed)?;
            let px = ds.images.channels * size * size;
            store = FeatureStore::new(px)?;
            for i in 0..count {
                let row: Vec<f32> =
                    ds.images.data[i * px..(i + 1) * px].iter().map(|&v| v as f32).collect();
                store.push_row(&row)?;
                let mut e = ManifestEntry::new(format!("img-{i:05}"), i as u64);
                e.label = Some(ds.labels[i] as i64);
                entries.push(e);
            }
            detail = json!({ "images": count, "classes": synth::TEXTURE_CLASSES, "size": size });
        }
        "mil_bags" => {
            let count = select(a.count, cfg.gen.count, 250);
            let dim = select(a.dim, cfg.gen.dim, 32);
            let lo = select(a.min_instances, cfg.gen.min_instances, 8);
            let hi = select(a.max_instances, cfg.gen.max_instances, 16);
            let rate = select(a.signal_rate, cfg.gen.signal_rate, 0.5);
            let ds = synth::mil_bags(count, dim, lo, hi, rate, seed)?;
            store = FeatureStore::new(dim)?;
            let mut row_index = 0u64;
            for (b, bag) in ds.bags.iter().enumerate() {
                for j in 0..bag.n_instances() {
                    let row: Vec<f32> = bag.instances()[j * dim..(j + 1) * dim]
                        .iter()
                        .map(|&v| v as f32)
                        .collect();
                    store.push_row(&row)?;
                    let mut e = ManifestEntry::new(format!("bag-{b:04}/{j}"), row_index);
                    e.bag_id = Some(format!("bag-{b:04}"));
                    e.label = Some(ds.labels[b] as i64);
                    entries.push(e);
                    row_index += 1;
                }
            }
            let positives = ds.labels.iter().filter(|&&l| l == 1).count();
            detail = json!({ "bags": count, "positives": positives, "dim": dim });
        }
        "survival" => {
            let count = select(a.count, cfg.gen.count, 200);
            let dim = select(a.dim, cfg.gen.dim, 32);
            let ds = synth::survival_bags(count, dim, seed)?;
            store = FeatureStore::new(dim)?;
            let mut row_index = 0u64;
            for (b, bag) in ds.bags.iter().enumerate() {
                for j in 0..bag.n_instances() {
                    let row: Vec<f32> = bag.instances()[j * dim..(j + 1) * dim]
                        .iter()
                        .map(|&v| v as f32)
                        .collect();
                    store.push_row(&row)?;
                    let mut e = ManifestEntry::new(format!("case-{b:04}/{j}"), row_index);
                    e.bag_id = Some(format!("case-{b:04}"));
                    e.time = Some(ds.times[b]);
                    e.event = Some(ds.events[b]);
                    entries.push(e);
                    row_index += 1;
                }
            }
            let observed = ds.events.iter().filter(|&&e| e).count();
            detail = json!({ "bags": count, "events_observed": observed, "dim": dim });
        }
        "clusters" => {
            let classes = select(a.classes, cfg.gen.classes, 9);
            let per_class = select(a.per_class, cfg.gen.per_class, 100);
            let dim = select(a.dim, cfg.gen.dim, 32);
            let spread = select(a.spread, cfg.gen.spread, 1.0);
            let ds = synth::clusters(classes, per_class, dim, spread, seed)?;
            store = FeatureStore::new(dim)?;
            for i in 0..ds.len() {
                let row: Vec<f32> = ds.row(i).iter().map(|&v| v as f32).collect();
                store.push_row(&row)?;
                let mut e = ManifestEntry::new(format!("pt-{i:05}"), i as u64);
                e.label = Some(ds.labels[i] as i64);
                entries.push(e);
            }
            detail = json!({ "classes": classes, "per_class": per_class, "dim": dim });
        }
        other => {
            return Err(UkdError::Config(format!(
                "unknown kind '{other}'; expected pretrain_textures, mil_bags, survival, or clusters"
            )));
        }
    }
    store.write(&store_path)?;
    write_manifest(&manifest_path, &entries)?;
    eprintln!("wrote {} rows of dim {} to {}", store.count(), store.dim(), store_path.display());
    Ok(json!({
        "kind": kind,
        "seed": seed,
        "store": store_path.display().to_string(),
        "manifest": manifest_path.display().to_string(),
        "rows": store.count(),
        "dim": store.dim(),
        "detail": detail,
    }))
}

// ── pretrain ──

fn preset_config(name: &str) -> Result<TrainConfig> {
    match name {
        "toy" => Ok(TrainConfig::toy()),
        "paper-fullscale" => Ok(TrainConfig::paper_fullscale()),
        other => Err(UkdError::Config(format!(
            "unknown preset '{other}'; expected toy or paper-fullscale"
        ))),
    }
}

// Fixed per-role seeds derived from the run seed keep the frozen teachers
// decorrelated from each other and from the trainer's own streams.
const TEACHER_SEED_TAGS: [u64; 3] = [0x7465_6163_685F_6100, 0x7465_6163_685F_6200, 0x7465_6163_685F_6300];
const FROZEN_TEACHER_DIMS: [usize; 3] = [48, 40, 56];

fn load_file_teacher(path: &Path, grid: usize) -> Result<FeatureFileTeacher> {
    let store = FeatureStore::read(path)?;
    let per_row = 1 + grid * grid;
    if store.dim() % per_row != 0 {
        return Err(UkdError::Dimension(format!(
            "teacher store dim {} is not a multiple of 1 + grid^2 = {per_row}",
            store.dim()
        )));
    }
    let dim = store.dim() / per_row;
    FeatureFileTeacher::new(store, dim, grid, 2)
}

fn cmd_pretrain(a: &PretrainArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "pretrain")?;
    let preset = cfg.preset.clone().unwrap_or_else(|| a.preset.clone());
    let mut train_cfg = preset_config(&preset)?;
    if let Some(b) = a.batch.or(cfg.train.batch) {
        train_cfg.batch_size = b;
    }
    if a.dry_run {
        return Ok(json!({
            "preset": preset,
            "config": serde_json::to_value(&train_cfg)
                .map_err(|e| UkdError::Config(format!("config serialization: {e}")))?,
        }));
    }

    let seed = require_seed(a.seed.or(cfg.seed))?;
    let out_dir = require(pick(&a.out_dir, &cfg.paths.out_dir), "--out-dir")?;
    fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.ukd");
    let log_path = out_dir.join("steps.jsonl");
    let config_path = out_dir.join("run.toml");
    let resume = pick(&a.resume, &cfg.paths.resume);
    if resume.is_none() {
        guard_overwrite(&ckpt_path, a.common.force)?;
        guard_overwrite(&log_path, a.common.force)?;
    }

    // Dataset: a feature store of flattened images, or the builtin toy
    // texture set derived from the run seed.
    let images = match pick(&a.data, &cfg.paths.data) {
        Some(path) => {
            let store = FeatureStore::read(&path)?;
            let side = train_cfg.vit.image_size;
            let px = train_cfg.vit.channels * side * side;
            if store.dim() != px {
                return Err(UkdError::Dimension(format!(
                    "store rows of dim {} cannot be {}x{side}x{side} images",
                    store.dim(),
                    train_cfg.vit.channels
                )));
            }
            let data: Vec<f64> = store.rows().iter().map(|&v| v as f64).collect();
            ImageBatch::new(data, store.count(), train_cfg.vit.channels, side)?
        }
        None => synth::pretrain_textures(1000, train_cfg.vit.image_size, seed)?.images,
    };

    let grid = train_cfg.crops.global_size / train_cfg.vit.patch_size;
    let files = [
        pick(&a.teacher_a, &cfg.paths.teacher_a),
        pick(&a.teacher_b, &cfg.paths.teacher_b),
        pick(&a.teacher_c, &cfg.paths.teacher_c),
    ];
    let mut providers: Vec<Box<dyn TeacherProvider>> = Vec::new();
    for (i, file) in files.iter().enumerate() {
        match file {
            Some(path) => providers.push(Box::new(load_file_teacher(path, grid)?)),
            None => providers.push(Box::new(FrozenRandomNetwork::new(
                seed ^ TEACHER_SEED_TAGS[i],
                FROZEN_TEACHER_DIMS[i],
                grid,
                train_cfg.crops.global_size,
                train_cfg.vit.channels,
            )?)),
        }
    }
    let roles = TeacherRole::all();
    let declared: Vec<(TeacherRole, usize)> =
        roles.iter().zip(&providers).map(|(&r, p)| (r, p.dim())).collect();

    let mut trainer = match &resume {
        Some(path) => Trainer::load(path, train_cfg.clone())?,
        None => Trainer::new(train_cfg.clone(), seed, &declared)?,
    };
    let total = train_cfg.schedule.total_steps;
    let remaining = total.saturating_sub(trainer.step);
    let budget = a.steps.or(cfg.train.steps).unwrap_or(remaining).min(remaining);
    let every = a.checkpoint_every.or(cfg.train.checkpoint_every);

    let provider_refs: Vec<(TeacherRole, &dyn TeacherProvider)> =
        roles.iter().zip(&providers).map(|(&r, p)| (r, p.as_ref())).collect();
    let mut log_lines = String::new();
    let mut totals = Vec::with_capacity(budget as usize);
    for _ in 0..budget {
        let log = trainer.train_step(&images, &provider_refs)?;
        if log.step % 100 == 99 || log.step + 1 == total {
            eprintln!(
                "step {:>6}/{} lr {:.3e} total {:.4} dino {:.4} ibot {:.4} expert {:.4}",
                log.step + 1, total, log.lr, log.total, log.dino, log.ibot, log.expert
            );
        }
        totals.push(log.total);
        let line = serde_json::to_string(&log)
            .map_err(|e| UkdError::Config(format!("log serialization: {e}")))?;
        let _ = writeln!(log_lines, "{line}");
        if let Some(n) = every {
            if n > 0 && trainer.step % n == 0 && trainer.step < total {
                trainer.save(&out_dir.join(format!("step-{:06}.ukd", trainer.step)))?;
            }
        }
    }
    trainer.save(&ckpt_path)?;
    fs::write(&log_path, log_lines)?;

    let mut resolved = RunConfig::default();
    resolved.module = Some("pretrain".into());
    resolved.preset = Some(preset.clone());
    resolved.seed = Some(seed);
    resolved.train.steps = Some(budget);
    resolved.train.batch = Some(train_cfg.batch_size);
    let toml_text = toml::to_string(&resolved)
        .map_err(|e| UkdError::Config(format!("config serialization: {e}")))?;
    fs::write(&config_path, toml_text)?;

    let ma50 = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (first_ma, last_ma) = if totals.len() >= 50 {
        (Some(ma50(&totals[..50])), Some(ma50(&totals[totals.len() - 50..])))
    } else {
        (None, None)
    };
    Ok(json!({
        "preset": preset,
        "seed": seed,
        "steps_run": budget,
        "step": trainer.step,
        "total_steps": total,
        "checkpoint": ckpt_path.display().to_string(),
        "log": log_path.display().to_string(),
        "ma50_first": first_ma,
        "ma50_last": last_ma,
        "final_total": totals.last(),
    }))
}

// ── extract ──

fn cmd_extract(a: &ExtractArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "extract")?;
    let checkpoint = require(pick(&a.checkpoint, &cfg.paths.checkpoint), "--checkpoint")?;
    let data = require(pick(&a.data, &cfg.paths.data), "--data")?;
    let manifest = require(pick(&a.manifest, &cfg.paths.manifest), "--manifest")?;
    let prefix = require(pick(&a.out_prefix, &cfg.paths.out), "--out-prefix")?;
    let preset = cfg.preset.clone().unwrap_or_else(|| a.preset.clone());
    let train_cfg = preset_config(&preset)?;
    let store_path = prefix.with_extension("feat");
    let manifest_path = prefix.with_extension("manifest.jsonl");
    guard_overwrite(&store_path, a.common.force)?;
    guard_overwrite(&manifest_path, a.common.force)?;
    if let Some(dir) = store_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }

    let trainer = Trainer::load(&checkpoint, train_cfg.clone())?;
    let (input, entries) = read_features(&data, &manifest)?;
    let side = train_cfg.vit.image_size;
    let px = train_cfg.vit.channels * side * side;
    if input.dim() != px {
        return Err(UkdError::Dimension(format!(
            "store rows of dim {} cannot be {}x{side}x{side} images",
            input.dim(),
            train_cfg.vit.channels
        )));
    }
    let grid = side / train_cfg.vit.patch_size;
    let out_dim = if a.teacher_mode {
        train_cfg.vit.dim * (1 + grid * grid)
    } else {
        train_cfg.vit.dim
    };
    let mut out_store = FeatureStore::new(out_dim)?;
    let all: Vec<f64> = input.rows().iter().map(|&v| v as f64).collect();
    let dataset = ImageBatch::new(all, input.count(), train_cfg.vit.channels, side)?;
    let indices: Vec<usize> = (0..input.count()).collect();
    for chunk in indices.chunks(64) {
        let batch = gather(&dataset, chunk)?;
        let rows = trainer.encode(&batch, a.ema, a.teacher_mode)?;
        for row in rows.chunks(out_dim) {
            let f32row: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            out_store.push_row(&f32row)?;
        }
    }
    let out_entries: Vec<ManifestEntry> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut n = e.clone();
            n.row_index = i as u64;
            n
        })
        .collect();
    out_store.write(&store_path)?;
    write_manifest(&manifest_path, &out_entries)?;
    eprintln!(
        "embedded {} images into {} ({} per row)",
        input.count(),
        store_path.display(),
        out_dim
    );
    Ok(json!({
        "rows": out_store.count(),
        "dim": out_dim,
        "store": store_path.display().to_string(),
        "manifest": manifest_path.display().to_string(),
        "weights": if a.ema { "teacher" } else { "student" },
        "patches": a.teacher_mode,
    }))
}

// ── probe ──

const SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

fn cmd_probe(a: &ProbeArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "probe")?;
    let features = require(pick(&a.features, &cfg.paths.data), "--features")?;
    let manifest = require(pick(&a.manifest, &cfg.paths.manifest), "--manifest")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let (store, entries) = read_features(&features, &manifest)?;
    let labels = entry_labels(&entries)?;
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let split = stratified_split(&labels, &SPLIT_RATIOS, seed)?;
    let parts: Vec<(Vec<f64>, Vec<usize>)> = split
        .parts
        .iter()
        .map(|idx| {
            let feats = gather_rows(&store, idx)?;
            let ys = idx.iter().map(|&i| labels[i]).collect();
            Ok((feats, ys))
        })
        .collect::<Result<_>>()?;
    let dim = store.dim();
    let train = ProbeData::new(&parts[0].0, &parts[0].1, dim)?;
    let val = ProbeData::new(&parts[1].0, &parts[1].1, dim)?;
    let test = ProbeData::new(&parts[2].0, &parts[2].1, dim)?;

    let mut probe_cfg = LinearProbeConfig::default();
    if let Some(e) = a.epochs.or(cfg.train.epochs) {
        probe_cfg.max_epochs = e;
    }
    if let Some(b) = a.batch.or(cfg.train.batch) {
        probe_cfg.batch = b;
    }
    let (head, logs) = train_linear_probe(&train, Some(&val), n_classes, &probe_cfg, seed)?;
    let pred = probe_predict(&head, &test)?;
    let truth = &parts[2].1;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    eprintln!("probe: {} epochs, test accuracy {:.4}", logs.len(), correct as f64 / pred.len() as f64);
    Ok(json!({
        "n_classes": n_classes,
        "n_train": train.len(),
        "n_val": val.len(),
        "n_test": test.len(),
        "epochs_ran": logs.len(),
        "accuracy": correct as f64 / pred.len() as f64,
        "balanced_accuracy": balanced_accuracy(truth, &pred)?,
        "weighted_f1": weighted_f1(truth, &pred)?,
        "warnings": split.warnings,
    }))
}

// ── mil ──

fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn abmil_preset(name: &str, n_outputs: usize) -> Result<AbmilConfig> {
    match name {
        "paper-abmil" => Ok(AbmilConfig::paper_preset(n_outputs)),
        other => Err(UkdError::Config(format!("unknown preset '{other}'; expected paper-abmil"))),
    }
}

fn cmd_mil(a: &MilArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "mil")?;
    let features = require(pick(&a.features, &cfg.paths.data), "--features")?;
    let manifest = require(pick(&a.manifest, &cfg.paths.manifest), "--manifest")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let (store, entries) = read_features(&features, &manifest)?;
    let groups = group_bags(&entries)?;
    let bags = bags_to_features(&store, &groups)?;
    let labels: Vec<usize> = groups
        .iter()
        .map(|grp| match grp.label {
            Some(l) if l >= 0 => Ok(l as usize),
            _ => Err(UkdError::Config(format!("bag {} has no usable label", grp.name))),
        })
        .collect::<Result<_>>()?;
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let split = stratified_split(&labels, &SPLIT_RATIOS, seed)?;
    let take = |idx: &[usize]| -> (Vec<FeatureBag>, Vec<usize>) {
        (idx.iter().map(|&i| bags[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (train_b, train_y) = take(&split.parts[0]);
    let (val_b, val_y) = take(&split.parts[1]);
    let (test_b, test_y) = take(&split.parts[2]);

    let mut mil_cfg = abmil_preset(&a.preset, n_classes)?;
    if let Some(e) = a.epochs.or(cfg.train.epochs) {
        mil_cfg.max_epochs = e;
    }
    let (model, logs) = train_abmil(&train_b, &train_y, &val_b, &val_y, &mil_cfg, seed)?;

    let mut pred = Vec::with_capacity(test_b.len());
    let mut probs = Vec::with_capacity(test_b.len() * n_classes);
    for bag in &test_b {
        let (logits, _) = abmil_predict(&model, bag)?;
        let p = softmax_probs(&logits);
        let best = p
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap().then(y.0.cmp(&x.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        pred.push(best);
        probs.extend(p);
    }
    let auc = if n_classes == 2 {
        let y: Vec<bool> = test_y.iter().map(|&l| l == 1).collect();
        let s: Vec<f64> = probs.chunks(2).map(|p| p[1]).collect();
        auc_binary(&y, &s)?
    } else {
        auc_macro_ovr(&test_y, &probs, n_classes)?
    };
    eprintln!("mil: {} epochs, test auc {auc:.4}", logs.len());
    Ok(json!({
        "n_bags": bags.len(),
        "n_classes": n_classes,
        "n_train": train_b.len(),
        "n_val": val_b.len(),
        "n_test": test_b.len(),
        "epochs_ran": logs.len(),
        "auc": auc,
        "balanced_accuracy": balanced_accuracy(&test_y, &pred)?,
        "weighted_f1": weighted_f1(&test_y, &pred)?,
        "warnings": split.warnings,
    }))
}

// ── survival ──

fn cmd_survival(a: &SurvivalArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "survival")?;
    let features = require(pick(&a.features, &cfg.paths.data), "--features")?;
    let manifest = require(pick(&a.manifest, &cfg.paths.manifest), "--manifest")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let (store, entries) = read_features(&features, &manifest)?;
    let groups = group_bags(&entries)?;
    let bags = bags_to_features(&store, &groups)?;
    let times: Vec<f64> = groups
        .iter()
        .map(|g| {
            g.time.ok_or_else(|| {
                UkdError::Config(format!("bag {} has no survival time", g.name))
            })
        })
        .collect::<Result<_>>()?;
    let events: Vec<bool> = groups
        .iter()
        .map(|g| {
            g.event.ok_or_else(|| {
                UkdError::Config(format!("bag {} has no event flag", g.name))
            })
        })
        .collect::<Result<_>>()?;

    // Split stratified on the event flag only; time bins are fitted on the
    // training part afterwards so the edges never see held-out data.
    let event_keys: Vec<usize> = events.iter().map(|&e| usize::from(e)).collect();
    let split = stratified_split(&event_keys, &SPLIT_RATIOS, seed)?;
    let train_times: Vec<f64> = split.parts[0].iter().map(|&i| times[i]).collect();
    let (spec, train_bins) = bin_survival_times(&train_times)?;
    let take = |idx: &[usize]| -> (Vec<FeatureBag>, Vec<usize>, Vec<bool>) {
        (
            idx.iter().map(|&i| bags[i].clone()).collect(),
            idx.iter().map(|&i| assign_bin(&spec, times[i])).collect(),
            idx.iter().map(|&i| events[i]).collect(),
        )
    };
    let (train_b, _, train_e) = take(&split.parts[0]);
    let (val_b, val_bins, val_e) = take(&split.parts[1]);
    let (test_b, _, test_e) = take(&split.parts[2]);

    let mut mil_cfg = abmil_preset(&a.preset, N_BINS)?;
    if let Some(e) = a.epochs.or(cfg.train.epochs) {
        mil_cfg.max_epochs = e;
    }
    let (model, logs) = train_abmil_survival(
        &train_b, &train_bins, &train_e, &val_b, &val_bins, &val_e, &mil_cfg, seed,
    )?;

    let mut risks = Vec::with_capacity(test_b.len());
    let mut records = Vec::with_capacity(test_b.len());
    for (pos, bag) in test_b.iter().enumerate() {
        risks.push(abmil_risk(&model, bag)?);
        let i = split.parts[2][pos];
        let mut rec = SurvivalRecord::new(times[i], test_e[pos])?;
        rec.bin = assign_bin(&spec, times[i]);
        records.push(rec);
    }
    let ci = c_index(&risks, &records)?;
    eprintln!("survival: {} epochs, test c-index {ci:.4}", logs.len());
    Ok(json!({
        "n_bags": bags.len(),
        "n_train": train_b.len(),
        "n_val": val_b.len(),
        "n_test": test_b.len(),
        "epochs_ran": logs.len(),
        "c_index": ci,
        "bin_edges": spec.edges,
        "bin_counts": spec.counts,
        "degenerate_bins": spec.degenerate,
        "warnings": split.warnings,
    }))
}

// ── retrieve ──

fn cmd_retrieve(a: &RetrieveArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "retrieve")?;
    let features = require(pick(&a.features, &cfg.paths.data), "--features")?;
    let manifest = require(pick(&a.manifest, &cfg.paths.manifest), "--manifest")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let norm_name = pick(&a.norm, &cfg.eval.normalization).unwrap_or_else(|| "zscore".into());
    let norm = match norm_name.as_str() {
        "zscore" => Normalization::ZScore,
        "minmax" => Normalization::MinMax,
        other => {
            return Err(UkdError::Config(format!(
                "unknown normalization '{other}'; expected zscore or minmax"
            )));
        }
    };
    let ks = pick(&a.ks, &cfg.eval.ks).unwrap_or_else(|| vec![1, 3, 5]);
    let qf = select(a.query_fraction, cfg.eval.query_fraction, 0.2);
    if !(qf > 0.0 && qf < 1.0) {
        return Err(UkdError::Parameter(format!(
            "query fraction must lie strictly between 0 and 1, got {qf}"
        )));
    }

    let (store, entries) = read_features(&features, &manifest)?;
    let labels = entry_labels(&entries)?;
    let split = stratified_split(&labels, &[1.0 - qf, qf], seed)?;
    let db_rows = gather_rows(&store, &split.parts[0])?;
    let db_labels: Vec<usize> = split.parts[0].iter().map(|&i| labels[i]).collect();
    let q_rows = gather_rows(&store, &split.parts[1])?;
    let q_labels: Vec<usize> = split.parts[1].iter().map(|&i| labels[i]).collect();
    let index = RetrievalIndex::build(&db_rows, &db_labels, store.dim(), norm)?;
    let acc = acc_at_k(&index, &q_rows, &q_labels, &ks)?;
    let accuracy: Vec<Value> =
        ks.iter().zip(&acc).map(|(&k, &v)| json!({ "k": k, "value": v })).collect();
    eprintln!("retrieve: {} database rows, {} queries", db_labels.len(), q_labels.len());
    Ok(json!({
        "normalization": norm_name,
        "n_database": db_labels.len(),
        "n_queries": q_labels.len(),
        "accuracy": accuracy,
        "warnings": split.warnings,
    }))
}

// ── stats ──

fn cmd_stats(a: &StatsArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "stats")?;
    let matrix_path = require(pick(&a.matrix, &cfg.paths.matrix), "--matrix")?;
    let seed = require_seed(a.seed.or(cfg.seed))?;
    let replicates = select(a.replicates, cfg.eval.replicates, 1000);
    let matrix = read_rank_csv(&matrix_path)?;
    let n_tasks = matrix.tasks.len();
    let mut models = Vec::with_capacity(matrix.models.len());
    for (m, name) in matrix.models.iter().enumerate() {
        let row: Vec<f64> = matrix.row(m).to_vec();
        let report = bootstrap(
            name,
            n_tasks,
            |idx| Ok(idx.iter().map(|&i| row[i]).sum::<f64>() / idx.len() as f64),
            replicates,
            seed,
        )?;
        models.push(serde_json::to_value(&report)
            .map_err(|e| UkdError::Config(format!("report serialization: {e}")))?);
    }
    let wilcoxon = match pick(&a.pair, &cfg.eval.pair) {
        Some(pair) => {
            let (na, nb) = pair.split_once(',').ok_or_else(|| {
                UkdError::Config(format!("--pair wants 'modelA,modelB', got '{pair}'"))
            })?;
            let find = |n: &str| {
                matrix.models.iter().position(|m| m == n.trim()).ok_or_else(|| {
                    UkdError::Config(format!("model '{}' is not in the matrix", n.trim()))
                })
            };
            let (ia, ib) = (find(na)?, find(nb)?);
            let res =
                wilcoxon_signed_rank(matrix.row(ia), matrix.row(ib), Alternative::TwoSided)?;
            json!({
                "model_a": na.trim(),
                "model_b": nb.trim(),
                "statistic": res.statistic,
                "n_used": res.n_used,
                "p_value": res.p_value,
                "exact": res.exact,
            })
        }
        None => Value::Null,
    };
    Ok(json!({
        "replicates": replicates,
        "seed": seed,
        "models": models,
        "wilcoxon": wilcoxon,
    }))
}

// ── rank ──

fn cmd_rank(a: &RankArgs, cfg: &RunConfig) -> Result<Value> {
    check_module(cfg, "rank")?;
    let matrix_path = require(pick(&a.matrix, &cfg.paths.matrix), "--matrix")?;
    let alpha = select(a.alpha, cfg.eval.alpha, 0.05);
    let matrix = read_rank_csv(&matrix_path)?;
    let report = compare_models(&matrix, alpha)?;
    serde_json::to_value(&report).map_err(|e| UkdError::Config(format!("report serialization: {e}")))
}
