//! Nearest-neighbor retrieval over normalized feature vectors.
//!
//! An index is built from gallery features with per-feature statistics
//! fitted on the gallery alone; queries are normalized with those same
//! statistics and matched by Euclidean distance. Accuracy@K asks whether
//! any of the K nearest gallery items shares the query's label.
//! Run with `cargo run --release --example retrieval`.

use ukd::eval::{acc_at_k, Normalization, RetrievalIndex};
use ukd::synth;

fn main() -> ukd::Result<()> {
    let ds = synth::clusters(6, 80, 24, 1.5, 29)?;
    let n = ds.labels.len();
    let mut gallery_x = Vec::new();
    let mut gallery_y = Vec::new();
    let mut query_x = Vec::new();
    let mut query_y = Vec::new();
    for i in 0..n {
        if i % 4 == 3 {
            query_x.extend_from_slice(ds.row(i));
            query_y.push(ds.labels[i]);
        } else {
            gallery_x.extend_from_slice(ds.row(i));
            gallery_y.push(ds.labels[i]);
        }
    }
    println!("{} gallery items, {} queries, 6 classes", gallery_y.len(), query_y.len());

    for norm in [Normalization::ZScore, Normalization::MinMax] {
        let index = RetrievalIndex::build(&gallery_x, &gallery_y, ds.dim, norm)?;
        let accs = acc_at_k(&index, &query_x, &query_y, &[1, 3, 5])?;
        println!(
            "{norm:?}: Acc@1 {:.3}  Acc@3 {:.3}  Acc@5 {:.3}",
            accs[0], accs[1], accs[2]
        );
    }

    // A closer look at one query under the z-score index.
    let index = RetrievalIndex::build(&gallery_x, &gallery_y, ds.dim, Normalization::ZScore)?;
    let q = 0;
    let hits = index.retrieve(&query_x[q * ds.dim..(q + 1) * ds.dim], 5)?;
    println!("\nquery 0 (class {}), five nearest gallery items:", query_y[q]);
    for (rank, (id, dist)) in hits.iter().enumerate() {
        println!(
            "  #{} gallery {:>3} class {} distance {:.3}",
            rank + 1,
            id,
            gallery_y[*id],
            dist
        );
    }

    // Per-feature affine rescaling of all features (same gains and offsets
    // on gallery and queries) leaves z-scored retrieval unchanged.
    let warp = |xs: &[f64]| -> Vec<f64> {
        xs.iter().enumerate().map(|(i, v)| 3.0 * v + [0.5, -2.0][i % 2]).collect()
    };
    let warped = RetrievalIndex::build(&warp(&gallery_x), &gallery_y, ds.dim, Normalization::ZScore)?;
    let wq = warp(&query_x);
    let a = acc_at_k(&index, &query_x, &query_y, &[1, 3, 5])?;
    let b = acc_at_k(&warped, &wq, &query_y, &[1, 3, 5])?;
    println!("\nz-scored accuracy invariant under feature rescaling: {}", a == b);
    Ok(())
}
