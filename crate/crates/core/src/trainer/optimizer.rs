use crate::autodiff::Array;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array>) -> Self {
        let m: Vec<Array> = shapes.into_iter().map(|a| Array::zeros(a.rows(), a.cols())).collect();
        Adam { step: 0, v: m.clone(), m }
    }
}

pub fn global_norm(grads: &[&Array]) -> f64 {
    grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt()
}

/// One Adam descent step on `grads` after scaling them so their global norm
/// is at most `clip`. Returns the pre-clipping norm.
pub fn optimizer_step(
    params: Vec<&mut Array>,
    grads: &[&Array],
    state: &mut Adam,
    learning_rate: f64,
    clip: f64,
) -> Result<f64, TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Optimizer(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::Optimizer(format!("non-finite gradient norm {norm}")));
    }
    let scale = if norm > clip { clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TrainError::Optimizer(format!("shape {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in it {
            let g = g * scale;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
    Ok(norm)
}
