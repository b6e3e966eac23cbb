#![allow(dead_code)]

use biattn::autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use biattn::corpus::{generate_synthetic, SentencePair, SyntheticTask};
use biattn::model::{init_parameters, ModelDims, ModelParameters, TENSOR_NAMES};

pub const ABS_FLOOR: f64 = 1e-8;

/// Two short swap-task pairs (lengths 1..=5) and their model dimensions.
pub fn toy_batch(seed: u64, hidden: usize) -> (Vec<SentencePair>, ModelDims) {
    let c = generate_synthetic(SyntheticTask::LexiconSwapWithLocalReorder, 8, 2, (1, 5), seed).unwrap();
    let dims = ModelDims {
        source_vocab: c.source_vocab.len(),
        target_vocab: c.target_vocab.len(),
        embed: hidden,
        hidden,
    };
    (c.pairs, dims)
}

/// Glorot init with the zero biases replaced by small random values, so
/// no check passes only because a tensor starts at zero.
pub fn perturbed_parameters(dims: ModelDims, seed: u64) -> ModelParameters {
    let mut p = init_parameters(dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in p.tensors_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
    }
    p
}

/// Fourth-order central differences of `f` with respect to every coordinate
/// of every model in `params`:
/// `(8(f(p+h) − f(p−h)) − (f(p+2h) − f(p−2h))) / 12h`.
///
/// The two-point rule leaves roundoff near 1e-10 on objectives of size ~10,
/// which swamps gradients of order 1e-8; this stencil stays accurate there.
pub fn numeric_gradients(
    f: impl Fn(&[ModelParameters]) -> f64,
    params: &[ModelParameters],
    eps: f64,
) -> Vec<ModelParameters> {
    let mut work = params.to_vec();
    let mut out: Vec<ModelParameters> = params.iter().map(|p| p.zeros_like()).collect();
    for m in 0..work.len() {
        for t in 0..TENSOR_NAMES.len() {
            for i in 0..work[m].tensors()[t].len() {
                let orig = work[m].tensors()[t].data()[i];
                let mut at = |d: f64| {
                    work[m].tensors_mut()[t].data_mut()[i] = orig + d;
                    f(&work)
                };
                let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
                work[m].tensors_mut()[t].data_mut()[i] = orig;
                out[m].tensors_mut()[t].data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            }
        }
    }
    out
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Largest relative error and where it occurred.
pub fn compare_models(analytic: &[ModelParameters], numeric: &[ModelParameters]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (m, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (t, (ta, tn)) in a.tensors().into_iter().zip(n.tensors()).enumerate() {
            for (i, (&x, &y)) in ta.data().iter().zip(tn.data()).enumerate() {
                let r = rel_err(x, y);
                if r > worst.0 || worst.1.is_empty() {
                    worst = (r, format!("model {m} {}[{i}]: analytic {x:e} numeric {y:e}", TENSOR_NAMES[t]));
                }
            }
        }
    }
    worst
}

/// Row-stochastic matrix from logits.
pub fn softmax_rows(logits: &Array) -> Array {
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for x in row.iter_mut() {
            *x = (*x - m).exp() / s;
        }
    }
    out
}
