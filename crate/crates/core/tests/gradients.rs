//! Finite-difference oracles for the autodiff engine.
//!
//! Every differentiable primitive is checked against central differences at
//! h = 1e-6 over 100 random seeds with inputs drawn from [-1, 1], and the full
//! codec loss is checked end to end on a small configuration.

use imageome_core::graph::Var;
use imageome_core::trainer::TrainConfig;
use imageome_core::{CodecConfig, Graph, PhyloCodec, Tensor, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const PRIMITIVE_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-4;

// The floor makes the check an absolute one below 1e-4, where central
// differences at h=1e-6 bottom out in float roundoff (~1e-10).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Push every element away from `center` by at least `margin`, for ops with a
/// kink there (leaky rectifier at 0, absolute error at zero residual).
fn away_from(t: &Tensor, center: f64, margin: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if (v - center).abs() < margin {
                center + margin * if v >= center { 1.0 } else { -1.0 }
            } else {
                v
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Generic oracle: `build` maps input vars to a scalar loss var. Analytic
/// gradients from `backward` must match central differences coordinate-wise.
fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64, what: &str) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).scalar_value().unwrap()
    };

    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.shape());
        for j in 0..t.data().len() {
            let mut plus = inputs.to_vec();
            let mut pdata = t.data().to_vec();
            pdata[j] += H;
            plus[i] = Tensor::new(t.shape().to_vec(), pdata).unwrap();
            let mut minus = inputs.to_vec();
            let mut mdata = t.data().to_vec();
            mdata[j] -= H;
            minus[i] = Tensor::new(t.shape().to_vec(), mdata).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            assert!(
                rel_err(a, fd) < tol,
                "{what}: input {i} coord {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// Deterministic per-element weights so the scalarized loss is sensitive to
/// every output coordinate with a distinct coefficient.
fn weighted_mean(g: &mut Graph, out: Var, w: &Tensor) -> Var {
    let wv = g.input(w.clone());
    let prod = g.mul(out, wv).unwrap();
    g.mean_all(prod)
}

fn weights_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
    )
    .unwrap()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = weights_like(&mut rng, &[3, 4]);

        let wc = w.clone();
        fd_check(
            &[a.clone(), b.clone()],
            move |g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "add",
        );
        let wc = w.clone();
        fd_check(
            &[a.clone(), b.clone()],
            move |g, v| {
                let s = g.sub(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "sub",
        );
        let wc = w.clone();
        fd_check(
            &[a.clone(), b.clone()],
            move |g, v| {
                let s = g.mul(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "mul",
        );
        let wc = w.clone();
        fd_check(
            &[a.clone()],
            move |g, v| {
                let s = g.scale(v[0], -1.7);
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "scale",
        );
    }
}

#[test]
fn matmul_and_bias_ops_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = weights_like(&mut rng, &[3, 2]);
        let wc = w.clone();
        fd_check(
            &[a, b],
            move |g, v| {
                let s = g.matmul(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "matmul",
        );

        let x = rand_tensor(&mut rng, &[4, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let w = weights_like(&mut rng, &[4, 3]);
        let wc = w.clone();
        fd_check(
            &[x, bias],
            move |g, v| {
                let s = g.add_bias_rows(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "add_bias_rows",
        );

        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        let w = weights_like(&mut rng, &[2, 3, 3]);
        let wc = w.clone();
        fd_check(
            &[x, bias],
            move |g, v| {
                let s = g.add_bias_channels(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "add_bias_channels",
        );
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let w = weights_like(&mut rng, &[2, 4, 4]);
        let wc = w.clone();
        fd_check(
            &[x, k],
            move |g, v| {
                let s = g.conv2d(v[0], v[1]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "conv2d",
        );
    }
}

#[test]
fn nonlinearities_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        // keep inputs off the kink so the derivative exists at the sample
        let x = away_from(&rand_tensor(&mut rng, &[3, 4]), 0.0, 1e-3);
        let w = weights_like(&mut rng, &[3, 4]);
        let wc = w.clone();
        fd_check(
            &[x],
            move |g, v| {
                let s = g.leaky_relu(v[0], 0.1);
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "leaky_relu",
        );

        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = weights_like(&mut rng, &[3, 4]);
        let wc = w.clone();
        fd_check(
            &[x],
            move |g, v| {
                let s = g.softmax(v[0]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "softmax",
        );

        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = weights_like(&mut rng, &[3, 4]);
        let wc = w.clone();
        fd_check(
            &[x],
            move |g, v| {
                let s = g.normalize_rows(v[0]).unwrap();
                weighted_mean(g, s, &wc)
            },
            PRIMITIVE_TOL,
            "normalize_rows",
        );
    }
}

#[test]
fn losses_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        // keep the residual off zero so the absolute value is differentiable
        let diff = away_from(&rand_tensor(&mut rng, &[3, 4]), 0.0, 1e-3);
        let b = Tensor::new(
            vec![3, 4],
            a.data()
                .iter()
                .zip(diff.data())
                .map(|(&x, &d)| x + d)
                .collect(),
        )
        .unwrap();
        fd_check(
            &[a, b],
            |g, v| g.mae(v[0], v[1]).unwrap(),
            PRIMITIVE_TOL,
            "mae",
        );

        let logits = rand_tensor(&mut rng, &[4, 3]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let lc = labels.clone();
        fd_check(
            &[logits],
            move |g, v| g.cross_entropy_logits(v[0], &lc).unwrap(),
            PRIMITIVE_TOL,
            "cross_entropy_logits",
        );
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let w = weights_like(&mut rng, &[3, 3]);
        let wc = w.clone();
        fd_check(
            &[a, b],
            move |g, v| {
                let cat = g.concat(&[v[0], v[1]]).unwrap();
                let sl = g.slice_rows(cat, 1, 4).unwrap();
                weighted_mean(g, sl, &wc)
            },
            PRIMITIVE_TOL,
            "concat+slice_rows",
        );

        let x = rand_tensor(&mut rng, &[2, 6]);
        let w = weights_like(&mut rng, &[3, 4]);
        let wc = w.clone();
        fd_check(
            &[x],
            move |g, v| {
                let r = g.reshape(v[0], vec![3, 4]).unwrap();
                weighted_mean(g, r, &wc)
            },
            PRIMITIVE_TOL,
            "reshape",
        );

        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = weights_like(&mut rng, &[4, 3]);
        let wc = w.clone();
        fd_check(
            &[x],
            move |g, v| {
                let t = g.transpose2(v[0]).unwrap();
                weighted_mean(g, t, &wc)
            },
            PRIMITIVE_TOL,
            "transpose2",
        );

        let table = rand_tensor(&mut rng, &[5, 3]);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let w = weights_like(&mut rng, &[4, 3]);
        let wc = w.clone();
        let ic = idx.clone();
        fd_check(
            &[table],
            move |g, v| {
                let rows = g.gather_rows(v[0], &ic).unwrap();
                weighted_mean(g, rows, &wc)
            },
            PRIMITIVE_TOL,
            "gather_rows",
        );

        let x = rand_tensor(&mut rng, &[3, 4]);
        fd_check(&[x.clone()], |g, v| g.sum_all(v[0]), PRIMITIVE_TOL, "sum_all");
        fd_check(&[x], |g, v| g.mean_all(v[0]), PRIMITIVE_TOL, "mean_all");
    }
}

/// The straight-through convention defines d(loss)/dz as the gradient taken at
/// the quantized value. The oracle perturbs that forward value directly (the
/// code assignment is held fixed) and compares against the analytic gradient
/// reported at z.
#[test]
fn straight_through_composite_matches_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let z = rand_tensor(&mut rng, &[2, 3]);
        let zq = rand_tensor(&mut rng, &[2, 3]);
        let diff = away_from(&rand_tensor(&mut rng, &[2, 3]), 0.0, 1e-3);
        let target = Tensor::new(
            vec![2, 3],
            zq.data()
                .iter()
                .zip(diff.data())
                .map(|(&q, &d)| q + d)
                .collect(),
        )
        .unwrap();

        let mut g = Graph::new();
        let zv = g.param(z);
        let st = g.straight_through(zv, zq.clone()).unwrap();
        let tv = g.input(target.clone());
        let loss = g.mae(st, tv).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(zv).unwrap();

        let eval = |q: &Tensor| -> f64 {
            q.data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>()
                / q.data().len() as f64
        };
        for j in 0..zq.data().len() {
            let mut plus = zq.data().to_vec();
            plus[j] += H;
            let mut minus = zq.data().to_vec();
            minus[j] -= H;
            let fd = (eval(&Tensor::new(vec![2, 3], plus).unwrap())
                - eval(&Tensor::new(vec![2, 3], minus).unwrap()))
                / (2.0 * H);
            assert!(
                rel_err(analytic.data()[j], fd) < PRIMITIVE_TOL,
                "straight_through coord {j}: analytic {} vs fd {fd}",
                analytic.data()[j]
            );
        }
    }
}

/// A five-parameter MLP: y = leaky(x w1 + b1) w2 + b2 with w1 in R^{2x1}.
#[test]
fn five_parameter_mlp_matches_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let x = rand_tensor(&mut rng, &[1, 2]);
        let target = rand_tensor(&mut rng, &[1, 1]);
        let w1 = away_from(&rand_tensor(&mut rng, &[2, 1]), 0.0, 1e-2);
        let b1 = rand_tensor(&mut rng, &[1]);
        let w2 = away_from(&rand_tensor(&mut rng, &[1, 1]), 0.0, 1e-2);
        let b2 = rand_tensor(&mut rng, &[1]);
        // keep the hidden pre-activation away from the rectifier kink
        let pre = x.data()[0] * w1.data()[0] + x.data()[1] * w1.data()[1] + b1.data()[0];
        if pre.abs() < 1e-2 {
            continue;
        }
        let xc = x.clone();
        let tc = target.clone();
        fd_check(
            &[w1, b1, w2, b2],
            move |g, v| {
                let xv = g.input(xc.clone());
                let h = g.matmul(xv, v[0]).unwrap();
                let h = g.add_bias_rows(h, v[1]).unwrap();
                let h = g.leaky_relu(h, 0.1);
                let y = g.matmul(h, v[2]).unwrap();
                let y = g.add_bias_rows(y, v[3]).unwrap();
                let t = g.input(tc.clone());
                let d = g.sub(y, t).unwrap();
                let sq = g.mul(d, d).unwrap();
                g.mean_all(sq)
            },
            PRIMITIVE_TOL,
            "five_parameter_mlp",
        );
    }
}

/// Shared by the integration check below and the acceptance gate: analytic
/// gradients of the full training objective vs central differences over every
/// parameter coordinate, on a small configuration. The finite-difference side
/// evaluates the frozen-assignment surrogate (`forward_batch_frozen`), whose
/// true derivatives are what the straight-through estimator computes.
pub fn end_to_end_gradient_check(seed: u64) -> (usize, usize) {
    let cfg = CodecConfig::new(4, 4, 4, 2, 2, 2, 2, 3, 5, vec![2, 4]);
    let model = PhyloCodec::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let xs: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[4, 4, 4])).collect();
    let labels = vec![
        vec![rng.gen_range(0..2), rng.gen_range(0..4)],
        vec![rng.gen_range(0..2), rng.gen_range(0..4)],
    ];

    let (g, out, vars) = model.forward_batch(&xs, &labels, true).unwrap();
    let grads = g.backward(out.loss_main).unwrap();
    let snap = out.quant;
    // sanity: at the snapshot point the surrogate evaluates to the same loss
    let (gf, outf, _) = model.forward_batch_frozen(&xs, &labels, &snap).unwrap();
    let frozen_at_base = gf.value(outf.loss_main).scalar_value().unwrap();
    let base = g.value(out.loss_main).scalar_value().unwrap();
    assert!(
        (frozen_at_base - base).abs() < 1e-12,
        "surrogate disagrees at the base point: {base} vs {frozen_at_base}"
    );

    let codec_loss = |m: &PhyloCodec| -> f64 {
        let (g, out, _) = m.forward_batch_frozen(&xs, &labels, &snap).unwrap();
        g.value(out.loss_main).scalar_value().unwrap()
    };

    let mut checked = 0usize;
    let mut failures = 0usize;
    for (name, var) in &vars {
        let base = if name == "codebook" {
            model.codebook.codes.clone()
        } else {
            model.params[name].clone()
        };
        let analytic = grads.get_or_zeros(*var, base.shape());
        for j in 0..base.data().len() {
            let plus = codec_loss(&model.clone_with(name, &base, j, H));
            let minus = codec_loss(&model.clone_with(name, &base, j, -H));
            let fd = (plus - minus) / (2.0 * H);
            checked += 1;
            if rel_err(analytic.data()[j], fd) >= END_TO_END_TOL {
                failures += 1;
            }
        }
    }
    (checked, failures)
}

trait PerturbParam {
    fn clone_with(&self, name: &str, base: &Tensor, coord: usize, delta: f64) -> PhyloCodec;
}

impl PerturbParam for PhyloCodec {
    fn clone_with(&self, name: &str, base: &Tensor, coord: usize, delta: f64) -> PhyloCodec {
        let mut data = base.data().to_vec();
        data[coord] += delta;
        let t = Tensor::new(base.shape().to_vec(), data).unwrap();
        let mut out = PhyloCodec {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            codebook: self.codebook.clone(),
        };
        if name == "codebook" {
            out.codebook.codes = t;
        } else {
            out.params.insert(name.to_string(), t);
        }
        out
    }
}

#[test]
fn codec_total_loss_matches_finite_differences() {
    let mut total = 0usize;
    let mut bad = 0usize;
    for seed in 0..5u64 {
        let (checked, failures) = end_to_end_gradient_check(100 + seed);
        total += checked;
        bad += failures;
    }
    assert!(total > 10_000, "expected thousands of coordinates, got {total}");
    assert_eq!(bad, 0, "{bad} of {total} coordinates exceeded tolerance");
}

/// The optimizer must leave gradients untouched between steps: two identical
/// models trained on the same batch stay bitwise equal.
#[test]
fn train_step_bitwise_deterministic_across_instances() {
    let cfg = CodecConfig::new(4, 4, 4, 2, 2, 2, 2, 3, 5, vec![2, 4]);
    let mut a = PhyloCodec::init(cfg.clone(), 7).unwrap();
    let mut b = PhyloCodec::init(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[4, 4, 4])).collect();
    let labels = vec![vec![0, 1], vec![1, 2], vec![0, 3]];
    let mut ta = Trainer::new(TrainConfig::default());
    let mut tb = Trainer::new(TrainConfig::default());
    for _ in 0..5 {
        ta.train_step(&mut a, &xs, &labels).unwrap();
        tb.train_step(&mut b, &xs, &labels).unwrap();
    }
    assert_eq!(a.params, b.params);
    assert_eq!(a.codebook.codes, b.codebook.codes);
}
