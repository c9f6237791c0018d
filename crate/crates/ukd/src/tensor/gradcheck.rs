//! Finite-difference gradient checking.
//!
//! [`check_gradients`] compares reverse-mode gradients against central
//! differences computed purely from forward evaluations, so it stays
//! independent of the backward implementation it audits. [`primitive_suite`]
//! runs randomized instances of every differentiable primitive; nonsmooth ops
//! are sampled away from their kinks, where the derivative is defined.

use super::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Worst observed deviation for one checked function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, finite difference)` at the max.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Check reverse-mode gradients of `build` (inputs -> scalar) against central
/// differences with step `h`, for every element of every input.
///
/// `build` must be deterministic: it is re-invoked on perturbed copies of the
/// inputs and any internal randomness has to replay identically.
pub fn check_gradients<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |data: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = data
            .iter()
            .map(|(shape, vals)| g.input(shape, vals.clone(), false))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, vals)| g.input(shape, vals.clone(), true))
        .collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.values(v).len()]))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].1.len() {
            let orig = work[i].1[e];
            work[i].1[e] = orig + h;
            let fp = eval(&work)?;
            work[i].1[e] = orig - h;
            let fm = eval(&work)?;
            work[i].1[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[i][e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e, an, fd));
            }
        }
    }
    Ok(report)
}

/// Result row of [`primitive_suite`].
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn rand_vals(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

/// Values avoiding the band `center +- gap` where a kinked op is nonsmooth.
fn rand_vals_off(rng: &mut Rng, n: usize, lo: f64, hi: f64, center: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.uniform_in(lo, hi);
            if (v - center).abs() > gap {
                break v;
            }
        })
        .collect()
}

/// Reduce an arbitrary output to a scalar through fixed random weights, so
/// every output element influences the checked value.
fn weighted(g: &mut Graph, y: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(&shape, weights.to_vec());
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

/// Run `instances` randomized gradient checks per differentiable primitive.
/// `h` is the central-difference step; errors are relative.
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let root = Rng::new(seed);
    let mut op_tag = 0u64;

    // Each case yields (inputs, weights-for-output, builder).
    macro_rules! sweep {
        ($name:literal, $gen:expr) => {{
            op_tag += 1;
            let mut worst = 0.0f64;
            for inst in 0..instances {
                let mut rng = root.substream(op_tag).substream(inst as u64);
                #[allow(clippy::type_complexity)]
                let (inputs, build): (
                    Vec<(Vec<usize>, Vec<f64>)>,
                    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
                ) = $gen(&mut rng);
                let rep = check_gradients(&inputs, 1e-5, |g, vars| build(g, vars))?;
                worst = worst.max(rep.max_rel_err);
            }
            out.push(OpCheck { name: $name, instances, max_rel_err: worst });
        }};
    }

    type Gen = (Vec<(Vec<usize>, Vec<f64>)>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

    sweep!("add", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 6, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], a), (vec![2, 3], b)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("sub", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 6, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], a), (vec![2, 3], b)],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("mul", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 6, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], a), (vec![2, 3], b)],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("neg", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 4, -2.0, 2.0);
        let w = rand_vals(rng, 4, -1.0, 1.0);
        (
            vec![(vec![4], a)],
            Box::new(move |g, v| {
                let y = g.neg(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("scale", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 4, -2.0, 2.0);
        let c = rng.uniform_in(-3.0, 3.0);
        let w = rand_vals(rng, 4, -1.0, 1.0);
        (
            vec![(vec![4], a)],
            Box::new(move |g, v| {
                let y = g.scale(v[0], c);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("add_bias", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 3, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], x), (vec![3], b)],
            Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("mul_bias", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 3, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], x), (vec![3], b)],
            Box::new(move |g, v| {
                let y = g.mul_bias(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("exp", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 5, -1.5, 1.5);
        let w = rand_vals(rng, 5, -1.0, 1.0);
        (
            vec![(vec![5], a)],
            Box::new(move |g, v| {
                let y = g.exp(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("log", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 5, 0.3, 3.0);
        let w = rand_vals(rng, 5, -1.0, 1.0);
        (
            vec![(vec![5], a)],
            Box::new(move |g, v| {
                let y = g.log(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("clamp_min", |rng: &mut Rng| -> Gen {
        // Some elements above and below the threshold, none near it.
        let a = rand_vals_off(rng, 6, -2.0, 2.0, 0.5, 1e-3);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![6], a)],
            Box::new(move |g, v| {
                let y = g.clamp_min(v[0], 0.5);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("tanh", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 5, -2.5, 2.5);
        let w = rand_vals(rng, 5, -1.0, 1.0);
        (
            vec![(vec![5], a)],
            Box::new(move |g, v| {
                let y = g.tanh(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("sigmoid", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 5, -3.0, 3.0);
        let w = rand_vals(rng, 5, -1.0, 1.0);
        (
            vec![(vec![5], a)],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("relu", |rng: &mut Rng| -> Gen {
        let a = rand_vals_off(rng, 6, -2.0, 2.0, 0.0, 1e-3);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![6], a)],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("gelu", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 5, -3.0, 3.0);
        let w = rand_vals(rng, 5, -1.0, 1.0);
        (
            vec![(vec![5], a)],
            Box::new(move |g, v| {
                let y = g.gelu(v[0]);
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("dropout", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 8, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        let mask_seed = rng.next_u64();
        (
            vec![(vec![8], a)],
            Box::new(move |g, v| {
                // Fixed seed: the mask replays identically on every forward.
                let mut mask_rng = Rng::new(mask_seed);
                let y = g.dropout(v[0], 0.4, &mut mask_rng)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("softmax_axis1", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 8, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        let temp = rng.uniform_in(0.2, 2.0);
        (
            vec![(vec![2, 4], a)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], 1, temp)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("softmax_axis0", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 8, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        let temp = rng.uniform_in(0.2, 2.0);
        (
            vec![(vec![2, 4], a)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], 0, temp)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("log_softmax", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 8, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        let temp = rng.uniform_in(0.2, 2.0);
        (
            vec![(vec![2, 4], a)],
            Box::new(move |g, v| {
                let y = g.log_softmax(v[0], 1, temp)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("layernorm", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 8, -2.0, 2.0);
        let gamma = rand_vals(rng, 4, 0.5, 1.5);
        let beta = rand_vals(rng, 4, -0.5, 0.5);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 4], x), (vec![4], gamma), (vec![4], beta)],
            Box::new(move |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("l2_normalize_rows", |rng: &mut Rng| -> Gen {
        // Rows with norm comfortably above the floor.
        let x = rand_vals_off(rng, 8, -2.0, 2.0, 0.0, 0.3);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 4], x)],
            Box::new(move |g, v| {
                let y = g.l2_normalize_rows(v[0], 1e-12)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("sum_all", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        (vec![(vec![2, 3], a)], Box::new(move |g, v| Ok(g.sum_all(v[0]))))
    });
    sweep!("mean_all", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        (vec![(vec![2, 3], a)], Box::new(move |g, v| Ok(g.mean_all(v[0]))))
    });
    sweep!("smooth_l1", |rng: &mut Rng| -> Gen {
        // Differences land in both regimes but away from |d| = beta.
        let a = rand_vals(rng, 6, -3.0, 3.0);
        let b: Vec<f64> = a
            .iter()
            .map(|&x| loop {
                let d = rng.uniform_in(-2.5, 2.5);
                if (d.abs() - 1.0).abs() > 1e-3 {
                    break x - d;
                }
            })
            .collect();
        (
            vec![(vec![6], a), (vec![6], b)],
            Box::new(move |g, v| g.smooth_l1(v[0], v[1], 1.0)),
        )
    });
    sweep!("cross_entropy", |rng: &mut Rng| -> Gen {
        // Normalized random target rows; student side free.
        let mut p = rand_vals(rng, 8, 0.05, 1.0);
        for r in 0..2 {
            let s: f64 = p[r * 4..(r + 1) * 4].iter().sum();
            for e in &mut p[r * 4..(r + 1) * 4] {
                *e /= s;
            }
        }
        let q = rand_vals(rng, 8, -2.0, 2.0);
        (
            vec![(vec![2, 4], q)],
            Box::new(move |g, v| {
                let pt = g.constant(&[2, 4], p.clone());
                let lq = g.log_softmax(v[0], 1, 1.0)?;
                g.cross_entropy(pt, lq)
            }),
        )
    });
    sweep!("gather_cols", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 12, -2.0, 2.0);
        let idx: Vec<usize> = (0..3).map(|_| rng.below_usize(4)).collect();
        let w = rand_vals(rng, 3, -1.0, 1.0);
        (
            vec![(vec![3, 4], x)],
            Box::new(move |g, v| {
                let y = g.gather_cols(v[0], &idx)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("matmul", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 12, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 3], a), (vec![3, 4], b)],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("matmul_nt", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let b = rand_vals(rng, 12, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 3], a), (vec![4, 3], b)],
            Box::new(move |g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("bmm", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 12, -2.0, 2.0);
        let b = rand_vals(rng, 12, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 2, 3], a), (vec![2, 3, 2], b)],
            Box::new(move |g, v| {
                let y = g.bmm(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("bmm_nt", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 12, -2.0, 2.0);
        let b = rand_vals(rng, 12, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 2, 3], a), (vec![2, 2, 3], b)],
            Box::new(move |g, v| {
                let y = g.bmm_nt(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("reshape", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 6, -2.0, 2.0);
        let w = rand_vals(rng, 6, -1.0, 1.0);
        (
            vec![(vec![2, 3], a)],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("concat_rows", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 4, -2.0, 2.0);
        let b = rand_vals(rng, 6, -2.0, 2.0);
        let w = rand_vals(rng, 10, -1.0, 1.0);
        (
            vec![(vec![2, 2], a), (vec![3, 2], b)],
            Box::new(move |g, v| {
                let y = g.concat_rows(&[v[0], v[1]])?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("select_rows", |rng: &mut Rng| -> Gen {
        let a = rand_vals(rng, 8, -2.0, 2.0);
        let idx: Vec<usize> = (0..5).map(|_| rng.below_usize(4)).collect();
        let w = rand_vals(rng, 10, -1.0, 1.0);
        (
            vec![(vec![4, 2], a)],
            Box::new(move |g, v| {
                let y = g.select_rows(v[0], &idx)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("mask_rows", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 8, -2.0, 2.0);
        let tok = rand_vals(rng, 2, -2.0, 2.0);
        let mask: Vec<bool> = (0..4).map(|_| rng.bernoulli(0.5)).collect();
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![4, 2], x), (vec![2], tok)],
            Box::new(move |g, v| {
                let y = g.mask_rows(v[0], v[1], &mask)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("scale_rows", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 8, -2.0, 2.0);
        let scales = rand_vals(rng, 4, -2.0, 2.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![4, 2], x)],
            Box::new(move |g, v| {
                let y = g.scale_rows(v[0], &scales)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("split_merge_heads", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 24, -2.0, 2.0);
        let w = rand_vals(rng, 24, -1.0, 1.0);
        (
            vec![(vec![6, 4], x)], // b=2 t=3 h=2 dh=2
            Box::new(move |g, v| {
                let sp = g.split_heads(v[0], 2, 3, 2)?;
                let mg = g.merge_heads(sp, 2, 2)?;
                weighted(g, mg, &w)
            }),
        )
    });
    sweep!("bilinear_grid", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 8, -2.0, 2.0);
        let w = rand_vals(rng, 32, -1.0, 1.0);
        (
            vec![(vec![4, 2], x)], // 2x2 grid of 2-dim vectors -> 4x4
            Box::new(move |g, v| {
                let y = g.bilinear_grid(v[0], 2, 4)?;
                weighted(g, y, &w)
            }),
        )
    });
    sweep!("linear", |rng: &mut Rng| -> Gen {
        let x = rand_vals(rng, 6, -2.0, 2.0);
        let wt = rand_vals(rng, 12, -1.0, 1.0);
        let b = rand_vals(rng, 4, -1.0, 1.0);
        let w = rand_vals(rng, 8, -1.0, 1.0);
        (
            vec![(vec![2, 3], x), (vec![4, 3], wt), (vec![4], b)],
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted(g, y, &w)
            }),
        )
    });

    Ok(out)
}
