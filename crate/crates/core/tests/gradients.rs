//! Reverse-mode gradients against central differences.

mod common;

use biattn::agreement::{joint_objective, joint_objective_with_gradients, loss, loss_on, LossKind};
use biattn::autodiff::{Array, Axis, Tape, Var};
use biattn::model::{bind, forced_pass, ModelParameters};
use common::{compare_models, numeric_gradients, perturbed_parameters, rel_err, softmax_rows, toy_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Var;

fn weights_for(shape: [usize; 2]) -> Array {
    Array::from_fn(shape[0], shape[1], |i, j| 0.5 + ((i * 31 + j * 17) % 10) as f64 / 10.0)
}

/// `Σ W ⊙ op(inputs)` with a fixed positive `W`, so every output entry matters.
fn projected(tape: &mut Tape<'_>, vars: &[Var], build: &Build) -> Var {
    let out = build(tape, vars);
    let w = tape.leaf(weights_for(tape.value(out).shape()));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn max_op_error(inputs: &[Array], build: &Build) -> f64 {
    let eval = |xs: &[Array]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|a| tape.leaf_ref(a)).collect();
        let root = projected(&mut tape, &vars, build);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf_ref(a)).collect();
    let root = projected(&mut tape, &vars, build);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Array> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    // Fourth-order central stencil: its error is far below 1e-6 even for
    // small gradients, which the two-point rule cannot promise.
    let eps = 1e-3;
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            let mut at = |d: f64| {
                work[t].data_mut()[i] = orig + d;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
            work[t].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            worst = worst.max(rel_err(analytic[t].data()[i], numeric));
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array {
    Array::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

fn check_op_trials(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Array>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 1009);
    for trial in 0..100 {
        let (inputs, build) = make(&mut rng);
        let err = max_op_error(&inputs, &*build);
        assert!(err < 1e-6, "{name} trial {trial}: relative error {err:e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

#[test]
fn matmul_gradient() {
    check_op_trials("matmul", |rng| {
        let (r, k) = dims(rng);
        let c = rng.gen_range(1..5);
        let ins = vec![random(rng, r, k, 0.5, 1.5), random(rng, k, c, 0.5, 1.5)];
        (ins, Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()))
    });
}

#[test]
fn add_and_row_broadcast_gradients() {
    check_op_trials("add", |rng| {
        let (r, c) = dims(rng);
        let ins = vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, -2.0, 2.0)];
        (ins, Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
    });
    check_op_trials("add_row", |rng| {
        let (r, c) = dims(rng);
        let ins = vec![random(rng, r, c, -2.0, 2.0), random(rng, 1, c, -2.0, 2.0)];
        (ins, Box::new(|t, v| t.add(v[0], v[1]).unwrap()))
    });
}

#[test]
fn sub_mul_and_scalar_mul_gradients() {
    check_op_trials("sub", |rng| {
        let (r, c) = dims(rng);
        let ins = vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, -2.0, 2.0)];
        (ins, Box::new(|t, v| t.sub(v[0], v[1]).unwrap()))
    });
    check_op_trials("mul", |rng| {
        let (r, c) = dims(rng);
        let ins = vec![random(rng, r, c, 0.5, 2.0), random(rng, r, c, -2.0, -0.5)];
        (ins, Box::new(|t, v| t.mul(v[0], v[1]).unwrap()))
    });
    check_op_trials("scalar_mul", |rng| {
        let (r, c) = dims(rng);
        let k = rng.gen_range(-3.0..3.0);
        let ins = vec![random(rng, r, c, -2.0, 2.0)];
        (ins, Box::new(move |t, v| t.scalar_mul(v[0], k)))
    });
}

#[test]
fn elementwise_nonlinearity_gradients() {
    check_op_trials("tanh", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(|t, v| t.tanh(v[0])))
    });
    check_op_trials("sigmoid", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, -3.0, 3.0)], Box::new(|t, v| t.sigmoid(v[0])))
    });
    check_op_trials("log", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, 0.2, 3.0)], Box::new(|t, v| t.log(v[0]).unwrap()))
    });
    check_op_trials("square", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, 0.3, 2.0)], Box::new(|t, v| t.square(v[0])))
    });
}

#[test]
fn softmax_and_sum_gradients() {
    check_op_trials("row_softmax", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c.max(2), -2.0, 2.0)], Box::new(|t, v| t.row_softmax(v[0])))
    });
    check_op_trials("sum", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(|t, v| t.sum(v[0])))
    });
}

#[test]
fn structural_op_gradients() {
    check_op_trials("concat", |rng| {
        let (r, c) = dims(rng);
        let c2 = rng.gen_range(1..4);
        let r2 = rng.gen_range(1..4);
        let ins = vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c2, -2.0, 2.0), random(rng, r2, c + c2, -2.0, 2.0)];
        (
            ins,
            Box::new(|t, v| {
                let wide = t.concat(&[v[0], v[1]], Axis::Cols).unwrap();
                t.concat(&[wide, v[2]], Axis::Rows).unwrap()
            }),
        )
    });
    check_op_trials("slice", |rng| {
        let (r, c) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let r0 = rng.gen_range(0..r - 1);
        let c0 = rng.gen_range(0..c - 1);
        let (r1, c1) = (rng.gen_range(r0 + 1..=r), rng.gen_range(c0 + 1..=c));
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(move |t, v| t.slice(v[0], r0..r1, c0..c1).unwrap()))
    });
    check_op_trials("row", |rng| {
        let (r, c) = dims(rng);
        let i = rng.gen_range(0..r);
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(move |t, v| t.row(v[0], i).unwrap()))
    });
    check_op_trials("transpose", |rng| {
        let (r, c) = dims(rng);
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(|t, v| t.transpose(v[0])))
    });
    check_op_trials("gather_rows", |rng| {
        let (r, c) = dims(rng);
        let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(move |t, v| t.gather_rows(v[0], &ids).unwrap()))
    });
    check_op_trials("pick", |rng| {
        let (r, c) = dims(rng);
        let cols: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        (vec![random(rng, r, c, -2.0, 2.0)], Box::new(move |t, v| t.pick(v[0], &cols).unwrap()))
    });
}

#[test]
fn fan_out_accumulates() {
    // x used three times: d/dx Σ (x·x + tanh x) = 2x + 1 − tanh²x.
    let x = Array::row_vector(vec![0.3, -1.2, 2.0]);
    let mut tape = Tape::new();
    let v = tape.leaf_ref(&x);
    let sq = tape.mul(v, v).unwrap();
    let th = tape.tanh(v);
    let s = tape.add(sq, th).unwrap();
    let root = tape.sum(s);
    let g = tape.backward(root).unwrap();
    for (i, &xi) in x.data().iter().enumerate() {
        let expect = 2.0 * xi + 1.0 - xi.tanh().powi(2);
        assert!((g.get(v).unwrap().data()[i] - expect).abs() < 1e-14);
    }
}

fn random_stochastic(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array {
    softmax_rows(&random(rng, r, c, -2.0, 2.0))
}

#[test]
fn loss_gradients_wrt_matrix_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kind in LossKind::ALL {
        for _ in 0..100 {
            let f = random_stochastic(&mut rng, 3, 4);
            let b = random_stochastic(&mut rng, 4, 3);
            let err = max_op_error(&[f, b], &move |t, v| loss_on(t, kind, v[0], v[1]).unwrap());
            assert!(err < 1e-6, "{kind}: {err:e}");
        }
    }
}

#[test]
fn mul_loss_through_softmax_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let lf = random(&mut rng, 3, 4, -2.0, 2.0);
        let lb = random(&mut rng, 4, 3, -2.0, 2.0);
        let build = |t: &mut Tape<'_>, v: &[Var]| {
            let f = t.row_softmax(v[0]);
            let b = t.row_softmax(v[1]);
            loss_on(t, LossKind::Mul, f, b).unwrap()
        };
        assert!(max_op_error(&[lf.clone(), lb.clone()], &build) < 1e-4);
        // and the value matches the eager loss
        let mut tape = Tape::new();
        let vars = [tape.leaf_ref(&lf), tape.leaf_ref(&lb)];
        let root = build(&mut tape, &vars);
        let eager = loss(LossKind::Mul, &softmax_rows(&lf), &softmax_rows(&lb)).unwrap();
        assert!((tape.value(root).item() - eager).abs() < 1e-12);
    }
}

#[test]
fn sentence_log_likelihood_gradient() {
    for seed in [1, 2] {
        let (batch, dims) = toy_batch(seed, 8);
        let params = vec![perturbed_parameters(dims, seed)];
        for pair in &batch {
            let ll = |p: &[ModelParameters]| {
                let mut tape = Tape::new();
                let w = bind(&mut tape, &p[0]);
                let out = forced_pass(&mut tape, &w, &pair.source, &pair.target).unwrap();
                tape.value(out.log_likelihood).item()
            };
            let mut tape = Tape::new();
            let w = bind(&mut tape, &params[0]);
            let out = forced_pass(&mut tape, &w, &pair.source, &pair.target).unwrap();
            let g = tape.backward(out.log_likelihood).unwrap();
            let tensors: Vec<Array> = w.tensors().into_iter().map(|&v| g.get_or_zeros(&tape, v)).collect();
            let analytic = vec![ModelParameters::from_tensors(dims, tensors).unwrap()];
            let numeric = numeric_gradients(ll, &params, 1e-3);
            let (err, at) = compare_models(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: {err:e} at {at}");
        }
    }
}

#[test]
fn joint_objective_gradient_single_pair() {
    let (batch, dims) = toy_batch(9, 8);
    let batch = &batch[..1];
    let fwd = perturbed_parameters(dims, 3);
    let bwd = perturbed_parameters(dims.reversed(), 4);
    for kind in LossKind::ALL {
        let (_, g) = joint_objective_with_gradients(batch, &fwd, &bwd, 1.0, Some(kind), true).unwrap();
        let (gf, gb) = g.unwrap();
        let f = |p: &[ModelParameters]| joint_objective(batch, &p[0], &p[1], 1.0, Some(kind)).unwrap().objective;
        let numeric = numeric_gradients(f, &[fwd.clone(), bwd.clone()], 1e-3);
        let (err, at) = compare_models(&[gf, gb], &numeric);
        assert!(err < 1e-4, "{kind}: {err:e} at {at}");
    }
}
