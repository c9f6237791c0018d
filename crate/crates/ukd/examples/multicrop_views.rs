//! The augmentation pipeline behind pretraining: multi-crop views and
//! patch masks.
//!
//! Each source image yields two global crops (which the teacher and student
//! both see) and several smaller local crops (student only), plus a random
//! block of masked patch positions per global view for the masked-patch
//! objective. Run with `cargo run --release --example multicrop_views`.

use ukd::pretrain::TrainConfig;
use ukd::rng::Rng;
use ukd::selfdistill::{make_views, ViewSet};
use ukd::synth;

fn main() -> ukd::Result<()> {
    let cfg = TrainConfig::toy();
    let data = synth::pretrain_textures(8, cfg.vit.image_size, 11)?;
    println!(
        "source batch: {} images, {}x{}, {} channels",
        data.images.batch, data.images.size, data.images.size, data.images.channels
    );

    let grid = cfg.crops.global_size / cfg.vit.patch_size;
    let tokens = grid * grid;
    let mut rng = Rng::new(3);
    let views = make_views(&data.images, &cfg.crops, tokens, &mut rng)?;

    println!(
        "\nviews per image: {} ({} global at {}px, {} local at {}px)",
        ViewSet::view_count(&cfg.crops),
        views.globals.len(),
        cfg.crops.global_size,
        views.locals.len(),
        cfg.crops.local_size,
    );
    for (i, g) in views.globals.iter().enumerate() {
        println!("  global {i}: batch {} size {}", g.batch, g.size);
    }
    for (i, l) in views.locals.iter().enumerate() {
        println!("  local  {i}: batch {} size {}", l.batch, l.size);
    }

    println!("\nmask ratio {:.2} over {tokens} patch tokens per global view:", cfg.crops.mask_ratio);
    for (v, view_masks) in views.masks.iter().enumerate() {
        let total: usize = view_masks.iter().map(|m| m.positions.len()).sum();
        println!(
            "  view {v}: {total} masked positions across {} images (mean {:.1}/image)",
            view_masks.len(),
            total as f64 / view_masks.len() as f64
        );
    }
    println!("\nimage 0, view 0 masked positions: {:?}", views.masks[0][0].positions);

    // The same seed reproduces the same crops and masks bit for bit.
    let mut rng2 = Rng::new(3);
    let again = make_views(&data.images, &cfg.crops, tokens, &mut rng2)?;
    let same = again.globals[0].data == views.globals[0].data
        && again.masks == views.masks;
    println!("re-running with the same seed reproduces the views: {same}");
    Ok(())
}
