//! Disagreement losses between a forward alignment matrix `A_f` (N×M) and a
//! backward one `A_b` (M×N), and the joint two-direction objective
//! `J = Σ log P(y|x) + Σ log P(x|y) − λ Σ Δ`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Tape, Var};
use crate::corpus::SentencePair;
use crate::model::{bind, forced_pass, ModelError, ModelParameters, Weights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgreementError {
    #[error("alignment shapes {forward:?} and {backward:?} are not transposes")]
    Shape { forward: [usize; 2], backward: [usize; 2] },
    #[error("mul loss undefined: cell products sum to {0}")]
    Domain(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("unknown agreement loss {0:?} (expected soa, sos, mul or none)")]
    UnknownKind(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for AgreementError {
    fn from(e: AutodiffError) -> Self {
        AgreementError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Soa,
    Sos,
    Mul,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Soa, LossKind::Sos, LossKind::Mul];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Soa => "soa",
            LossKind::Sos => "sos",
            LossKind::Mul => "mul",
        }
    }

    /// Parses the config value, where `none` disables agreement.
    pub fn parse_optional(s: &str) -> Result<Option<LossKind>, AgreementError> {
        if s.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = AgreementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "soa" => Ok(LossKind::Soa),
            "sos" => Ok(LossKind::Sos),
            "mul" => Ok(LossKind::Mul),
            _ => Err(AgreementError::UnknownKind(s.to_string())),
        }
    }
}

fn check_transposed(fwd: &Array, bwd: &Array) -> Result<(), AgreementError> {
    if fwd.rows() != bwd.cols() || fwd.cols() != bwd.rows() {
        return Err(AgreementError::Shape { forward: fwd.shape(), backward: bwd.shape() });
    }
    Ok(())
}

fn cell_sum(fwd: &Array, bwd: &Array, f: impl Fn(f64, f64) -> f64) -> Result<f64, AgreementError> {
    check_transposed(fwd, bwd)?;
    let mut total = 0.0;
    for n in 0..fwd.rows() {
        for m in 0..fwd.cols() {
            total += f(fwd.get(n, m), bwd.get(m, n));
        }
    }
    Ok(total)
}

/// `−Σ (A_f[n,m] + A_b[m,n])²`
pub fn loss_soa(fwd: &Array, bwd: &Array) -> Result<f64, AgreementError> {
    Ok(-cell_sum(fwd, bwd, |a, b| (a + b) * (a + b))?)
}

/// `Σ (A_f[n,m] − A_b[m,n])²`
pub fn loss_sos(fwd: &Array, bwd: &Array) -> Result<f64, AgreementError> {
    cell_sum(fwd, bwd, |a, b| (a - b) * (a - b))
}

/// `−log Σ A_f[n,m]·A_b[m,n]`
pub fn loss_mul(fwd: &Array, bwd: &Array) -> Result<f64, AgreementError> {
    let s = cell_sum(fwd, bwd, |a, b| a * b)?;
    if !(s > 0.0) {
        return Err(AgreementError::Domain(s));
    }
    Ok(-s.ln())
}

pub fn loss(kind: LossKind, fwd: &Array, bwd: &Array) -> Result<f64, AgreementError> {
    match kind {
        LossKind::Soa => loss_soa(fwd, bwd),
        LossKind::Sos => loss_sos(fwd, bwd),
        LossKind::Mul => loss_mul(fwd, bwd),
    }
}

/// Δ as a differentiable node.
pub fn loss_on(tape: &mut Tape<'_>, kind: LossKind, fwd: Var, bwd: Var) -> Result<Var, AgreementError> {
    check_transposed(tape.value(fwd), tape.value(bwd))?;
    let bt = tape.transpose(bwd);
    Ok(match kind {
        LossKind::Soa => {
            let s = tape.add(fwd, bt)?;
            let sq = tape.square(s);
            let total = tape.sum(sq);
            tape.scalar_mul(total, -1.0)
        }
        LossKind::Sos => {
            let d = tape.sub(fwd, bt)?;
            let sq = tape.square(d);
            tape.sum(sq)
        }
        LossKind::Mul => {
            let p = tape.mul(fwd, bt)?;
            let total = tape.sum(p);
            let s = tape.value(total).item();
            if !(s > 0.0) {
                return Err(AgreementError::Domain(s));
            }
            let l = tape.log(total)?;
            tape.scalar_mul(l, -1.0)
        }
    })
}

/// Graph nodes for one sentence pair under the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct PairTerms {
    /// `ll_f + ll_b − λΔ`; with λ = 0 or no loss kind, just `ll_f + ll_b`.
    pub objective: Var,
    pub ll_forward: Var,
    pub ll_backward: Var,
    /// Δ value; `None` without a loss kind or when Δ is undefined at λ = 0.
    pub delta: Option<f64>,
}

/// Builds the joint objective of one pair on `tape`. The backward model reads
/// the target as its source.
///
/// With `λ = 0` the Δ term is evaluated on detached copies of the matrices,
/// so gradients are exactly those of the two likelihoods.
pub fn pair_objective_on(
    tape: &mut Tape<'_>,
    fwd: &Weights<Var>,
    bwd: &Weights<Var>,
    pair: &SentencePair,
    lambda: f64,
    kind: Option<LossKind>,
) -> Result<PairTerms, AgreementError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(AgreementError::Lambda(lambda));
    }
    let f = forced_pass(tape, fwd, &pair.source, &pair.target)?;
    let b = forced_pass(tape, bwd, &pair.target, &pair.source)?;
    let ll = tape.add(f.log_likelihood, b.log_likelihood)?;
    let mut terms = PairTerms { objective: ll, ll_forward: f.log_likelihood, ll_backward: b.log_likelihood, delta: None };
    let Some(kind) = kind else { return Ok(terms) };
    if lambda == 0.0 {
        terms.delta = loss(kind, tape.value(f.alignment), tape.value(b.alignment)).ok();
        return Ok(terms);
    }
    let delta = loss_on(tape, kind, f.alignment, b.alignment)?;
    terms.delta = Some(tape.value(delta).item());
    let penalty = tape.scalar_mul(delta, -lambda);
    terms.objective = tape.add(ll, penalty)?;
    Ok(terms)
}

/// Value of the joint objective over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct JointValue {
    pub objective: f64,
    pub ll_forward: f64,
    pub ll_backward: f64,
    /// Δ per pair (NaN when no loss kind is selected).
    pub deltas: Vec<f64>,
}

fn check_batch(batch: &[SentencePair], lambda: f64) -> Result<(), AgreementError> {
    if batch.is_empty() {
        return Err(AgreementError::EmptyBatch);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(AgreementError::Lambda(lambda));
    }
    Ok(())
}

/// `J` over a batch together with its parts.
pub fn joint_objective(
    batch: &[SentencePair],
    fwd: &ModelParameters,
    bwd: &ModelParameters,
    lambda: f64,
    kind: Option<LossKind>,
) -> Result<JointValue, AgreementError> {
    joint_objective_with_gradients(batch, fwd, bwd, lambda, kind, false).map(|(v, _)| v)
}

/// `J` and, when `grads` is set, `∂J/∂θ_f` and `∂J/∂θ_b` summed over the batch.
pub fn joint_objective_with_gradients(
    batch: &[SentencePair],
    fwd: &ModelParameters,
    bwd: &ModelParameters,
    lambda: f64,
    kind: Option<LossKind>,
    grads: bool,
) -> Result<(JointValue, Option<(ModelParameters, ModelParameters)>), AgreementError> {
    check_batch(batch, lambda)?;
    let mut value = JointValue { objective: 0.0, ll_forward: 0.0, ll_backward: 0.0, deltas: Vec::new() };
    let mut acc = grads.then(|| (fwd.zeros_like(), bwd.zeros_like()));
    for pair in batch {
        let mut tape = Tape::new();
        let wf = bind(&mut tape, fwd);
        let wb = bind(&mut tape, bwd);
        let terms = pair_objective_on(&mut tape, &wf, &wb, pair, lambda, kind)?;
        value.ll_forward += tape.value(terms.ll_forward).item();
        value.ll_backward += tape.value(terms.ll_backward).item();
        value.deltas.push(terms.delta.unwrap_or(f64::NAN));
        if let Some((gf, gb)) = acc.as_mut() {
            let g = tape.backward(terms.objective)?;
            for (w, dst) in [(&wf, gf), (&wb, gb)] {
                for (v, d) in w.tensors().into_iter().zip(dst.tensors_mut()) {
                    if let Some(a) = g.get(*v) {
                        d.add_assign(a);
                    }
                }
            }
        }
    }
    let delta_sum: f64 = if kind.is_some() { value.deltas.iter().sum() } else { 0.0 };
    value.objective = value.ll_forward + value.ll_backward - lambda * delta_sum;
    Ok((value, acc))
}
