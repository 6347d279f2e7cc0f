//! Finite-difference and reference-implementation checks for the tape and
//! the optimizer, all in double precision.

use matcomp_core::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(op(inputs) * weights)` so every output element contributes.
type Program = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn scalarize(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn evaluate(program: &Program, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &vars);
    let s = scalarize(&mut tape, out, 99);
    tape.value(s).item().unwrap()
}

/// Max relative error between tape gradients and central differences.
fn gradient_error(program: &Program, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = program(&mut tape, &vars);
    let s = scalarize(&mut tape, out, 99);
    let grads = tape.backward(s).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient");
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (evaluate(program, &plus) - evaluate(program, &minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            worst = worst.max(err);
        }
    }
    worst
}

fn check(name: &str, program: &Program, shapes: &[&[usize]], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let err = gradient_error(program, &inputs);
    assert!(err <= REL_TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn matmul_gradients() {
    check("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), &[&[2, 3, 4], &[4, 5]], 1);
    check("linear", &|t, v| t.linear(v[0], v[1], v[2]).unwrap(), &[&[2, 3, 4], &[4, 5], &[5]], 12);
}

#[test]
fn batch_matmul_gradients() {
    check("bmm", &|t, v| t.batch_matmul(v[0], v[1], false).unwrap(), &[&[3, 2, 4], &[3, 4, 5]], 2);
    check("bmm^T", &|t, v| t.batch_matmul(v[0], v[1], true).unwrap(), &[&[3, 2, 4], &[3, 5, 4]], 3);
}

#[test]
fn elementwise_gradients() {
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), &[&[3, 4], &[3, 4]], 4);
    check("add-broadcast", &|t, v| t.add(v[0], v[1]).unwrap(), &[&[2, 3, 4], &[3, 4]], 5);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), &[&[5], &[5]], 6);
    check("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), &[&[2, 3], &[2, 3]], 7);
    check("scale", &|t, v| t.scale(v[0], -2.5), &[&[6]], 8);
}

#[test]
fn nonlinearity_gradients() {
    check("softmax", &|t, v| t.softmax(v[0]), &[&[3, 5]], 9);
    check("gelu", &|t, v| t.gelu(v[0]), &[&[10]], 10);
    check(
        "layer_norm",
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap(),
        &[&[4, 6], &[6], &[6]],
        11,
    );
}

#[test]
fn shape_op_gradients() {
    check("reshape", &|t, v| t.reshape(v[0], &[6, 2]).unwrap(), &[&[3, 4]], 12);
    check("permute", &|t, v| t.permute(v[0], &[2, 0, 1, 3]).unwrap(), &[&[2, 3, 2, 2]], 13);
    check("transpose", &|t, v| t.transpose(v[0]).unwrap(), &[&[3, 4]], 14);
    check(
        "gather",
        &|t, v| t.gather(v[0], &[0, 3, 3, 1]).unwrap(),
        &[&[5, 3]],
        15,
    );
}

#[test]
fn reduction_gradients() {
    check("sum", &|t, v| t.sum(v[0]), &[&[3, 3]], 16);
    check("mean", &|t, v| t.mean(v[0]), &[&[2, 5]], 17);
}

#[test]
fn composite_attention_block_gradients() {
    // q k^T softmax v with a residual layer norm, as in one attention head.
    let program: &Program = &|t, v| {
        let scores = t.batch_matmul(v[0], v[1], true).unwrap();
        let scores = t.scale(scores, 0.5);
        let probs = t.softmax(scores);
        let ctx = t.batch_matmul(probs, v[2], false).unwrap();
        let res = t.add(ctx, v[0]).unwrap();
        let normed = t.layer_norm(res, v[3], v[4], 1e-12).unwrap();
        t.gelu(normed)
    };
    check("attention", program, &[&[2, 4, 3], &[2, 4, 3], &[2, 4, 3], &[3], &[3]], 18);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 4]);
        let w = random_tensor(&mut rng, &[4, 2]);

        let grad_of = |coef_f: f64, coef_g: f64| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let f_out = tape.softmax(xv);
            let f = tape.sum(f_out);
            let f = tape.mul(f, f).unwrap();
            let g_out = tape.matmul(xv, wv).unwrap();
            let g_out = tape.gelu(g_out);
            let g = tape.mean(g_out);
            let fa = tape.scale(f, coef_f);
            let gb = tape.scale(g, coef_g);
            let total = tape.add(fa, gb).unwrap();
            tape.backward(total).unwrap().take(xv).unwrap()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for j in 0..combined.len() {
            let expected = a * gf.data()[j] + b * gg.data()[j];
            prop_assert!((combined.data()[j] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.param(Tensor::from_fn(&[4, 8], |_| rng.random_range(-1.0..1.0)));
            let w = tape.param(Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0)));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.softmax(y);
            let s = tape.mean(y);
            let g = tape.backward(s).unwrap();
            (tape.value(y).clone(), g.get(w).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

/// Straight-line Adam written per scalar, independent of the tensor code.
fn reference_adam(params: &mut [f64], grads_per_step: &[Vec<f64>], cfg: AdamConfig) {
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    for (t, grads) in grads_per_step.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..params.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grads[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grads[j] * grads[j];
            let m_hat = m[j] / (1.0 - cfg.beta1.powi(t));
            let v_hat = v[j] / (1.0 - cfg.beta2.powi(t));
            params[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[test]
fn adam_matches_scalar_reference_over_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    let shapes: [&[usize]; 2] = [&[3, 4], &[5]];
    let mut params: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let mut flat: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    let mut history: Vec<Vec<Vec<f64>>> = vec![Vec::new(); params.len()];

    let mut state = AdamState::new(cfg, shapes.iter().copied());
    for _ in 0..100 {
        let grads: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.random_range(-2.0..2.0)))
            .collect();
        for (h, g) in history.iter_mut().zip(&grads) {
            h.push(g.data().to_vec());
        }
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        let grefs: Vec<&Tensor<f64>> = grads.iter().collect();
        adam_step(&mut refs, &grefs, &mut state).unwrap();
    }
    for ((p, flat_p), h) in params.iter().zip(flat.iter_mut()).zip(&history) {
        reference_adam(flat_p, h, cfg);
        for (a, b) in p.data().iter().zip(flat_p.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
    assert_eq!(state.step, 100);
}
