//! Multi-model benchmark comparison: average ranks, a critical difference,
//! and paired significance tests.
//!
//! Part one ranks the shipped table `data/avg_wsi_auc.csv` — published
//! average whole-slide-classification AUCs for nine pathology foundation
//! models. Part two shows the statistics that need per-task scores
//! (Nemenyi critical difference, pairwise signed-rank tests) on a
//! synthetic four-model, ten-task table, since a single averaged column
//! cannot support them. Run with
//! `cargo run --release --example benchmark_rank`.

use std::path::Path;

use ukd::rng::Rng;
use ukd::stats::{compare_models, read_rank_csv, RankMatrix};

fn main() -> ukd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/avg_wsi_auc.csv");
    let matrix = read_rank_csv(&path)?;
    println!(
        "{} models, {} score column, from {}\n",
        matrix.models.len(),
        matrix.tasks.len(),
        path.file_name().unwrap().to_string_lossy()
    );
    let report = compare_models(&matrix, 0.05)?;
    println!("{:<16} {:>10} {:>10}", "model", "mean AUC", "avg rank");
    for s in &report.summaries {
        println!("{:<16} {:>10.3} {:>10.2}", s.model, s.mean_score, s.average_rank);
    }

    // Rank statistics become meaningful with one score per task. Build a
    // synthetic table: model quality offsets plus task difficulty plus
    // noise, which is the structure benchmark suites actually have.
    let models = ["strong", "middling", "noisy", "weak"];
    let offsets = [0.12, 0.06, 0.05, 0.0];
    let n_tasks = 10;
    let mut rng = Rng::new(5);
    let task_base: Vec<f64> = (0..n_tasks).map(|_| rng.uniform_in(0.6, 0.8)).collect();
    let mut values = Vec::new();
    for (m, &off) in offsets.iter().enumerate() {
        let noise = if m == 2 { 0.05 } else { 0.01 };
        for base in &task_base {
            values.push(base + off + rng.normal() * noise);
        }
    }
    let synth = RankMatrix::new(
        models.iter().map(|s| s.to_string()).collect(),
        (0..n_tasks).map(|t| format!("task{t}")).collect(),
        values,
        vec![true; n_tasks],
    )?;
    let report = compare_models(&synth, 0.05)?;

    println!("\nsynthetic {}-task suite:", n_tasks);
    println!("{:<10} {:>12} {:>10}", "model", "mean score", "avg rank");
    for s in &report.summaries {
        println!("{:<10} {:>12.3} {:>10.2}", s.model, s.mean_score, s.average_rank);
    }
    if let Some(cd) = &report.critical_difference {
        println!(
            "\nNemenyi critical difference at alpha {}: {:.3} (q = {:.3}, k = {}, N = {})",
            cd.alpha, cd.cd, cd.q_critical, cd.k, cd.n_tasks
        );
        println!("average ranks closer than the CD are statistically indistinguishable;");
        println!("\"middling\" and \"noisy\" should land within one CD of each other.");
    }
    println!("\npairwise two-sided signed-rank p-values:");
    for p in &report.pairwise {
        if let Some(pv) = p.p_value {
            println!("  {:<10} vs {:<10} p = {pv:.4}", p.model_a, p.model_b);
        }
    }
    Ok(())
}
