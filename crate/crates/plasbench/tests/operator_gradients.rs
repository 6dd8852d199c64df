//! Finite-difference verification of every tape operator on randomized small
//! inputs, 64-bit mode: 100+ seeded random cases per operator, every
//! coordinate checked by central differences.

use plasbench::rng;
use plasbench::tape::{Tape, Var};
use plasbench::tensor::Tensor;

use rand::Rng as _;

const CASES: usize = 100;
const REL_TOL: f64 = 1e-4;

/// Checks d(loss)/d(leaf) for every leaf coordinate against central finite
/// differences of the rebuilt forward pass.
fn check_gradients(
    leaves: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
    context: &str,
) {
    let loss_of = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let mut perturbed: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape
            .grad(vars[li])
            .unwrap_or_else(|| panic!("{context}: leaf {li} got no gradient"));
        for i in 0..leaf.numel() {
            let orig = leaf.data[i];
            let h = 1e-5 * orig.abs().max(1.0);
            perturbed[li].data[i] = orig + h;
            let plus = loss_of(&perturbed);
            perturbed[li].data[i] = orig - h;
            let minus = loss_of(&perturbed);
            perturbed[li].data[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let abs = (analytic[i] - fd).abs();
            let rel = abs / fd.abs().max(1e-6);
            // Near-zero gradients drown in truncation error; an absolute
            // bound covers them.
            assert!(
                rel < REL_TOL || abs < 1e-8,
                "{context}: leaf {li} coord {i}: ad {} fd {fd} rel {rel}",
                analytic[i]
            );
        }
    }
}

fn tensor(rng: &mut rng::Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values bounded away from the relu kink, where the subgradient
/// convention makes finite differences disagree by design.
fn tensor_off_kink(rng: &mut rng::Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_range(0..2) == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(101);
    for case in 0..CASES {
        let (m, k, n) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let a = tensor(&mut rng, vec![m, k]);
        let b = tensor(&mut rng, vec![k, n]);
        check_gradients(
            &[a, b],
            &|tape, vars| {
                let prod = tape.matmul(vars[0], vars[1]).unwrap();
                tape.sum_all(prod)
            },
            &format!("matmul case {case}"),
        );
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(202);
    for case in 0..CASES {
        let batch = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let f = rng.random_range(1..3);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = rng.random_range(k..k + 4);
        let w = rng.random_range(k..k + 4);
        let x = tensor(&mut rng, vec![batch, c, h, w]);
        let weight = tensor(&mut rng, vec![f, c, k, k]);
        check_gradients(
            &[x, weight],
            &|tape, vars| {
                let out = tape.conv2d(vars[0], vars[1], stride, pad).unwrap();
                // A nonlinear readout so dx is not constant.
                let sq = tape.mul(out, out).unwrap();
                tape.mean_all(sq)
            },
            &format!("conv2d case {case} (k={k} s={stride} p={pad} {h}x{w})"),
        );
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(303);
    for case in 0..CASES {
        let n = rng.random_range(2..4);
        let c = rng.random_range(1..3);
        let h = rng.random_range(1..4);
        let w = rng.random_range(1..4);
        let x = tensor(&mut rng, vec![n, c, h, w]);
        let scale = tensor(&mut rng, vec![c]);
        let shift = tensor(&mut rng, vec![c]);
        check_gradients(
            &[x, scale, shift],
            &|tape, vars| {
                let (y, _, _) = tape
                    .batch_norm_train(vars[0], vars[1], vars[2], 1e-5)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            &format!("batch_norm train case {case}"),
        );
    }
}

#[test]
fn batch_norm_eval_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(304);
    for case in 0..CASES {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let x = tensor(&mut rng, vec![n, c, 2, 2]);
        let scale = tensor(&mut rng, vec![c]);
        let shift = tensor(&mut rng, vec![c]);
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        check_gradients(
            &[x, scale, shift],
            &|tape, vars| {
                let y = tape
                    .batch_norm_eval(vars[0], vars[1], vars[2], &mean, &var, 1e-5)
                    .unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            &format!("batch_norm eval case {case}"),
        );
    }
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(404);
    for case in 0..CASES {
        let n = rng.random_range(1..12);
        let x = tensor_off_kink(&mut rng, vec![n]);
        check_gradients(
            &[x],
            &|tape, vars| {
                let y = tape.relu(vars[0]);
                let sq = tape.mul(y, y).unwrap();
                tape.sum_all(sq)
            },
            &format!("relu case {case}"),
        );
    }
}

#[test]
fn softmax_cross_entropy_gradients_match_finite_differences() {
    let mut rng = rng::rng_from(505);
    for case in 0..CASES {
        let n = rng.random_range(1..4);
        let k = rng.random_range(2..6);
        let logits = tensor(&mut rng, vec![n, k]);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        check_gradients(
            &[logits],
            &|tape, vars| tape.softmax_cross_entropy(vars[0], &labels).unwrap(),
            &format!("softmax_ce case {case}"),
        );
    }
}

#[test]
fn elementwise_and_reduction_gradients_match_finite_differences() {
    // add, sub, mul, scale, bias broadcasts, pooling, reshape, mse in one
    // composite graph.
    let mut rng = rng::rng_from(606);
    for case in 0..CASES {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let x = tensor(&mut rng, vec![n, c, 2, 3]);
        let y = tensor(&mut rng, vec![n, c, 2, 3]);
        let bias = tensor(&mut rng, vec![c]);
        let row_bias = tensor(&mut rng, vec![c]);
        let target = tensor(&mut rng, vec![n, c]);
        check_gradients(
            &[x, y, bias, row_bias],
            &|tape, vars| {
                let sum = tape.add(vars[0], vars[1]).unwrap();
                let diff = tape.sub(sum, vars[1]).unwrap();
                let prod = tape.mul(diff, vars[1]).unwrap();
                let scaled = tape.scale(prod, 0.7);
                let biased = tape.add_bias_channel(scaled, vars[2]).unwrap();
                let pooled = tape.global_avg_pool(biased).unwrap();
                let rowed = tape.add_bias_row(pooled, vars[3]).unwrap();
                tape.mse_loss(rowed, &target).unwrap()
            },
            &format!("composite case {case}"),
        );
    }
}

#[test]
fn softmax_cross_entropy_is_translation_invariant() {
    let mut rng = rng::rng_from(707);
    for _ in 0..CASES {
        let n = rng.random_range(1..4);
        let k = rng.random_range(2..8);
        let logits = tensor(&mut rng, vec![n, k]);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let c: f64 = rng.random_range(-1e3..1e3);

        let eval = |z: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let v = tape.leaf(z.clone());
            let loss = tape.softmax_cross_entropy(v, &labels).unwrap();
            tape.value(loss).data[0]
        };
        let mut shifted = logits.clone();
        shifted.data.iter_mut().for_each(|v| *v += c);
        assert!(
            (eval(&logits) - eval(&shifted)).abs() < 1e-6,
            "shift {c} changed the loss"
        );
    }
}

#[test]
fn backward_is_additive_over_loss_terms() {
    let mut rng = rng::rng_from(808);
    for _ in 0..CASES {
        let dim = rng.random_range(1..6);
        let theta = tensor(&mut rng, vec![dim]);

        // L1 = sum(theta^2), L2 = 0.5 * sum(theta), combined on one tape.
        let grads_of = |combined: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(theta.clone().with_grad());
            let sq = tape.mul(v, v).unwrap();
            let l1 = tape.sum_all(sq);
            let half = tape.scale(v, 0.5);
            let l2 = tape.sum_all(half);
            if combined {
                let total = tape.add(l1, l2).unwrap();
                tape.backward(total).unwrap();
            } else {
                tape.backward(l1).unwrap();
                let g1 = tape.grad(v).unwrap().to_vec();
                tape.backward(l2).unwrap();
                let g2 = tape.grad(v).unwrap().to_vec();
                return g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            }
            tape.grad(v).unwrap().to_vec()
        };
        for (a, b) in grads_of(true).iter().zip(grads_of(false)) {
            assert!((a - b).abs() < 1e-6, "additivity: {a} vs {b}");
        }
    }
}
