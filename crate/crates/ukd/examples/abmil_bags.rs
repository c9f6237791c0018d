//! Gated attention-based multiple-instance learning on synthetic bags.
//!
//! Each bag is a set of instance feature vectors with one label for the
//! whole bag; a gated attention module learns which instances matter. The
//! synthetic generator plants a signal direction in positive bags, so the
//! learned attention should concentrate on signal instances.
//! Run with `cargo run --release --example abmil_bags`.

use ukd::eval::abmil::abmil_predict;
use ukd::eval::{train_abmil, AbmilConfig};
use ukd::stats::auc_binary;
use ukd::synth;

fn main() -> ukd::Result<()> {
    let ds = synth::mil_bags(150, 32, 8, 16, 0.4, 21)?;
    let (train_bags, test_bags) = ds.bags.split_at(120);
    let (train_labels, test_labels) = ds.labels.split_at(120);
    println!(
        "{} train / {} test bags, {}-dim instances, {} positives in train",
        train_bags.len(),
        test_bags.len(),
        ds.bags[0].dim,
        train_labels.iter().filter(|&&l| l == 1).count()
    );

    let mut cfg = AbmilConfig::paper_preset(2);
    cfg.max_epochs = 30;
    let (store, logs) = train_abmil(train_bags, train_labels, &[], &[], &cfg, 21)?;
    for log in logs.iter().step_by(10).chain(logs.last().filter(|l| l.epoch % 10 != 0)) {
        println!("epoch {:>3}: train loss {:.4}", log.epoch, log.train_loss);
    }

    let mut probs = Vec::new();
    let mut truth = Vec::new();
    for (bag, &label) in test_bags.iter().zip(test_labels) {
        let (logits, _) = abmil_predict(&store, bag)?;
        let m = logits[0].max(logits[1]);
        probs.push((logits[1] - m).exp() / ((logits[0] - m).exp() + (logits[1] - m).exp()));
        truth.push(label == 1);
    }
    println!("\nheld-out AUC over {} bags: {:.3}", test_bags.len(), auc_binary(&truth, &probs)?);

    // Attention is a distribution over a bag's instances.
    let bag = &test_bags[0];
    let (_, attention) = abmil_predict(&store, bag)?;
    let mut ranked: Vec<(usize, f64)> = attention.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!(
        "bag {} ({} instances, label {}): attention sums to {:.6}",
        bag.id,
        bag.n_instances(),
        test_labels[0],
        attention.iter().sum::<f64>()
    );
    println!("top instances by attention:");
    for (i, a) in ranked.iter().take(3) {
        println!("  instance {i:>2}: {a:.4}");
    }
    Ok(())
}
