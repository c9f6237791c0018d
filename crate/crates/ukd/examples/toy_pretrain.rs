//! A short unified-distillation pretraining run on synthetic textures.
//!
//! One student backbone learns from three signals at once: a momentum
//! teacher's class tokens (self-distillation), the same teacher's patch
//! tokens at masked positions, and three frozen "expert" networks whose
//! features the student matches through learned adapters. Here the experts
//! are frozen random networks, which is enough to watch every loss term
//! fall. Run with `cargo run --release --example toy_pretrain`.

use ukd::expert::{FrozenRandomNetwork, TeacherProvider, TeacherRole};
use ukd::pretrain::{gather, TrainConfig, Trainer};
use ukd::synth;

fn main() -> ukd::Result<()> {
    let seed = 7;
    let steps = 120;
    let cfg = TrainConfig::toy();
    let data = synth::pretrain_textures(256, cfg.vit.image_size, seed)?;
    println!(
        "dataset: {} textures, {} latent classes; student dim {}, depth {}",
        data.labels.len(),
        data.labels.iter().max().unwrap() + 1,
        cfg.vit.dim,
        cfg.vit.depth
    );

    // Three frozen teachers with different widths, seen through the same
    // global crops as the student.
    let dims = [48usize, 40, 56];
    let grid = cfg.crops.global_size / cfg.vit.patch_size;
    let nets: Vec<FrozenRandomNetwork> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            FrozenRandomNetwork::new(seed + i as u64, d, grid, cfg.crops.global_size, cfg.vit.channels)
        })
        .collect::<ukd::Result<_>>()?;
    let declared: Vec<(TeacherRole, usize)> =
        TeacherRole::all().iter().zip(dims).map(|(&r, d)| (r, d)).collect();
    let providers: Vec<(TeacherRole, &dyn TeacherProvider)> =
        TeacherRole::all().iter().zip(&nets).map(|(&r, n)| (r, n as &dyn TeacherProvider)).collect();

    let mut trainer = Trainer::new(cfg, seed, &declared)?;
    let probe: Vec<usize> = (0..64).collect();
    let align0 = trainer.alignment_probe(&data.images, &probe, TeacherRole::A, &nets[0])?;
    println!("teacher-a alignment before training: {align0:.3}\n");

    println!("{:>5} {:>9} {:>8} {:>8} {:>8} {:>8}", "step", "lr", "total", "self", "masked", "expert");
    for _ in 0..steps {
        let log = trainer.train_step(&data.images, &providers)?;
        if (log.step + 1) % 20 == 0 || log.step == 0 {
            println!(
                "{:>5} {:>9.2e} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                log.step + 1,
                log.lr,
                log.total,
                log.dino,
                log.ibot,
                log.expert
            );
        }
    }

    let align1 = trainer.alignment_probe(&data.images, &probe, TeacherRole::A, &nets[0])?;
    println!("\nteacher-a alignment after {steps} steps: {align1:.3} (was {align0:.3})");

    // The momentum teacher is the network you keep: encode a few images
    // with it and show the embedding dimensionality.
    let batch = gather(&data.images, &[0, 1, 2, 3])?;
    let feats = trainer.encode(&batch, true, false)?;
    println!("teacher CLS embeddings: {} images x {} dims", batch.batch, feats.len() / batch.batch);
    Ok(())
}
