//! Finite-difference audit of the autodiff op library.
//!
//! Every differentiable primitive is checked against central differences on
//! randomized shapes, and a composite loss shows how to check your own
//! graph. Run with `cargo run --release --example gradcheck`.

use ukd::tensor::{check_gradients, primitive_suite, Graph};

fn main() -> ukd::Result<()> {
    let instances = 20;
    println!("central-difference check, {instances} random instances per op\n");
    println!("{:<22} {:>12}", "op", "max rel err");
    let mut worst = ("", 0.0f64);
    for row in primitive_suite(instances, 7)? {
        println!("{:<22} {:>12.3e}", row.name, row.max_rel_err);
        if row.max_rel_err > worst.1 {
            worst = (row.name, row.max_rel_err);
        }
    }
    println!("\nworst primitive: {} at {:.3e}", worst.0, worst.1);

    // Checking a hand-built composite: softmax cross-entropy with a fused
    // temperature, gradients taken through both the logits and the bias.
    let logits = (0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>();
    let bias = vec![0.3, -0.1, 0.2, 0.05];
    let report = check_gradients(
        &[(vec![3, 4], logits), (vec![1, 4], bias)],
        1e-5,
        |g: &mut Graph, v| {
            let shifted = g.add_bias(v[0], v[1])?;
            let logp = g.log_softmax(shifted, 1, 0.07)?;
            let target = g.constant(
                &[3, 4],
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.25, 0.25, 0.25, 0.25],
            );
            g.cross_entropy(target, logp)
        },
    )?;
    println!("composite tempered cross-entropy: max rel err {:.3e}", report.max_rel_err);
    if let Some((input, elem, analytic, fd)) = report.worst {
        println!("  worst element: input {input} elem {elem}: analytic {analytic:.6e} vs fd {fd:.6e}");
    }
    Ok(())
}
