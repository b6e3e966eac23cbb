//! Mini-batch training of one direction on its likelihood, or of both
//! directions on the joint objective with an agreement term.

pub mod checkpoint;
mod config;
mod optimizer;

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::agreement::{self, AgreementError, LossKind};
use crate::autodiff::{Array, Tape};
use crate::corpus::{ParallelCorpus, SentencePair, Vocabulary};
use crate::decode::greedy_decode;
use crate::metrics;
use crate::model::{bind, forced_pass, init_parameters, ModelDims, ModelError, ModelParameters};

pub use checkpoint::{Checkpoint, CheckpointError, ResumeState, CHECKPOINT_VERSION};
pub use config::{TrainingConfig, CONFIG_KEYS};
pub use optimizer::{global_norm, optimizer_step, Adam, BETA1, BETA2, EPSILON};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: u64, detail: String },
    #[error("epoch {epoch}, step {step}: agreement undefined for {skipped} of {batch} pairs")]
    TooManySkipped { epoch: usize, step: u64, skipped: usize, batch: usize },
    #[error("{0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// source → target
    Forward,
    /// target → source
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    /// Initialization seed of this direction's parameters.
    pub fn init_seed(self, seed: u64) -> u64 {
        match self {
            Direction::Forward => seed,
            Direction::Backward => seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

impl FromStr for Direction {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(TrainError::Config(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One direction trained on its own likelihood.
    Independent(Direction),
    /// Both directions trained together on the joint objective.
    Joint,
}

impl Mode {
    pub fn directions(self) -> Vec<Direction> {
        match self {
            Mode::Independent(d) => vec![d],
            Mode::Joint => vec![Direction::Forward, Direction::Backward],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Independent(d) => write!(f, "independent-{}", d.name()),
            Mode::Joint => f.write_str("joint"),
        }
    }
}

impl FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Mode::Joint),
            _ => match s.strip_prefix("independent-") {
                Some(d) => Ok(Mode::Independent(d.parse()?)),
                None => Err(TrainError::Config(format!("unknown mode {s:?}"))),
            },
        }
    }
}

/// Totals of one epoch. Equality ignores `elapsed_secs`.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub pairs: usize,
    pub skipped: usize,
    /// Gold tokens scored per direction, EOS included.
    pub tokens: [usize; 2],
    pub ll_forward: f64,
    pub ll_backward: f64,
    /// Σ Δ over the epoch (0 without an agreement loss).
    pub delta: f64,
    /// λ actually applied (0 outside joint training).
    pub lambda: f64,
    /// `ll_forward + ll_backward − lambda · delta`.
    pub objective: f64,
    pub valid_bleu: Option<f64>,
    pub valid_objective: Option<f64>,
    /// Seconds since the run started; not serialized.
    pub elapsed_secs: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        let bits = |x: f64| x.to_bits();
        let obits = |x: Option<f64>| x.map(f64::to_bits);
        (self.epoch, self.steps, self.pairs, self.skipped, self.tokens) == (o.epoch, o.steps, o.pairs, o.skipped, o.tokens)
            && [self.ll_forward, self.ll_backward, self.delta, self.lambda, self.objective].map(bits)
                == [o.ll_forward, o.ll_backward, o.delta, o.lambda, o.objective].map(bits)
            && obits(self.valid_bleu) == obits(o.valid_bleu)
            && obits(self.valid_objective) == obits(o.valid_objective)
    }
}

impl EpochRecord {
    /// Mean negative log-likelihood per gold token of the first model.
    pub fn cross_entropy(&self) -> f64 {
        -self.ll_forward / self.tokens[0].max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

const HISTORY_HEADER: &str = "epoch\tsteps\tpairs\tskipped\ttokens_forward\ttokens_backward\tll_forward\tll_backward\tdelta\tlambda\tobjective\tvalid_bleu\tvalid_objective";

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl TrainingHistory {
    /// Tab-separated with a header row. Floats use shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.epoch,
                r.steps,
                r.pairs,
                r.skipped,
                r.tokens[0],
                r.tokens[1],
                r.ll_forward,
                r.ll_backward,
                r.delta,
                r.lambda,
                r.objective,
                opt_field(r.valid_bleu),
                opt_field(r.valid_objective),
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err("history header missing".into());
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 13 {
                return Err(format!("history row {}: {} fields", i + 1, f.len()));
            }
            let bad = |k: usize| format!("history row {}: bad field {}", i + 1, k + 1);
            let u = |k: usize| f[k].parse::<usize>().map_err(|_| bad(k));
            let x = |k: usize| f[k].parse::<f64>().map_err(|_| bad(k));
            let o = |k: usize| if f[k] == "-" { Ok(None) } else { x(k).map(Some) };
            records.push(EpochRecord {
                epoch: u(0)?,
                steps: f[1].parse().map_err(|_| bad(1))?,
                pairs: u(2)?,
                skipped: u(3)?,
                tokens: [u(4)?, u(5)?],
                ll_forward: x(6)?,
                ll_backward: x(7)?,
                delta: x(8)?,
                lambda: x(9)?,
                objective: x(10)?,
                valid_bleu: o(11)?,
                valid_objective: o(12)?,
                elapsed_secs: 0.0,
            });
        }
        Ok(TrainingHistory { records })
    }
}

/// Parameters and optimizer moments of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub direction: Direction,
    pub params: ModelParameters,
    pub adam: Adam,
}

impl ModelState {
    pub fn new(direction: Direction, params: ModelParameters) -> Self {
        let adam = Adam::new(params.tensors());
        ModelState { direction, params, adam }
    }
}

/// Model chosen by validation: highest forward BLEU, ties to the higher
/// validation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub bleu: f64,
    pub objective: f64,
    /// One per model, in [`Mode::directions`] order.
    pub params: Vec<ModelParameters>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub mode: Mode,
    pub epochs_done: usize,
    pub steps_done: u64,
    pub models: Vec<ModelState>,
    pub best: Option<Selection>,
    pub history: TrainingHistory,
}

impl TrainState {
    /// Fresh parameters. `dims` describes the forward direction.
    pub fn fresh(mode: Mode, dims: ModelDims, seed: u64) -> Self {
        let models = mode
            .directions()
            .into_iter()
            .map(|d| {
                let dd = match d {
                    Direction::Forward => dims,
                    Direction::Backward => dims.reversed(),
                };
                ModelState::new(d, init_parameters(dd, d.init_seed(seed)))
            })
            .collect();
        Self::with_models(mode, models)
    }

    /// Starts from given parameters (one per direction of `mode`) with fresh
    /// optimizer state.
    pub fn from_params(mode: Mode, params: Vec<ModelParameters>) -> Result<Self, TrainError> {
        let dirs = mode.directions();
        if params.len() != dirs.len() {
            return Err(TrainError::Config(format!("{mode} needs {} models, got {}", dirs.len(), params.len())));
        }
        for p in &params {
            p.validate()?;
        }
        Ok(Self::with_models(mode, dirs.into_iter().zip(params).map(|(d, p)| ModelState::new(d, p)).collect()))
    }

    fn with_models(mode: Mode, models: Vec<ModelState>) -> Self {
        TrainState { mode, epochs_done: 0, steps_done: 0, models, best: None, history: TrainingHistory::default() }
    }

    /// Selected parameters of model `i`, or the current ones before any validation.
    pub fn selected(&self, i: usize) -> &ModelParameters {
        match &self.best {
            Some(b) => &b.params[i],
            None => &self.models[i].params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Digest of each model's parameters after every optimizer step.
    pub trajectories: Vec<Vec<u64>>,
}

impl TrainOutcome {
    pub fn history(&self) -> &TrainingHistory {
        &self.state.history
    }

    pub fn selected(&self, i: usize) -> &ModelParameters {
        self.state.selected(i)
    }
}

/// Hash of the exact bit patterns of every parameter.
pub fn parameter_digest(p: &ModelParameters) -> u64 {
    let mut h = DefaultHasher::new();
    for t in p.tensors() {
        t.shape().hash(&mut h);
        for x in t.data() {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Worker threads: `BIATTN_THREADS` if set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("BIATTN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct PairResult {
    ll: [f64; 2],
    delta: Option<f64>,
    tokens: [usize; 2],
    grads: Vec<Vec<Option<Array>>>,
}

fn pair_pass(
    mode: Mode,
    models: &[ModelState],
    pair: &SentencePair,
    config: &TrainingConfig,
) -> Result<PairResult, AgreementError> {
    let mut tape = Tape::new();
    let ws: Vec<_> = models.iter().map(|m| bind(&mut tape, &m.params)).collect();
    let tokens = [pair.target.len() + 1, pair.source.len() + 1];
    let (root, ll, delta) = match mode {
        Mode::Independent(_) => {
            let f = forced_pass(&mut tape, &ws[0], &pair.source, &pair.target)?;
            (f.log_likelihood, [tape.value(f.log_likelihood).item(), 0.0], None)
        }
        Mode::Joint => {
            let t = agreement::pair_objective_on(
                &mut tape,
                &ws[0],
                &ws[1],
                pair,
                config.lambda,
                config.agreement_loss,
            )?;
            let ll = [tape.value(t.ll_forward).item(), tape.value(t.ll_backward).item()];
            (t.objective, ll, t.delta)
        }
    };
    let mut g = tape.backward(root)?;
    let grads = ws.iter().map(|w| w.tensors().into_iter().map(|v| g.take(*v)).collect()).collect();
    Ok(PairResult { ll, delta, tokens: if matches!(mode, Mode::Joint) { tokens } else { [tokens[0], 0] }, grads })
}

fn run_pairs<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if threads <= 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Data as seen by the first model of `mode`.
fn oriented(mode: Mode, corpus: &ParallelCorpus) -> (Vec<SentencePair>, Vocabulary) {
    match mode {
        Mode::Independent(Direction::Backward) => {
            (corpus.pairs.iter().map(SentencePair::reversed).collect(), corpus.source_vocab.clone())
        }
        _ => (corpus.pairs.clone(), corpus.target_vocab.clone()),
    }
}

/// Forward dimensions implied by the corpus and config.
pub fn corpus_dims(corpus: &ParallelCorpus, config: &TrainingConfig) -> ModelDims {
    ModelDims {
        source_vocab: corpus.source_vocab.len(),
        target_vocab: corpus.target_vocab.len(),
        embed: config.embed_dim,
        hidden: config.hidden_dim,
    }
}

/// Validation BLEU of the first model's greedy output and the objective on
/// the validation pairs.
fn validate(
    mode: Mode,
    models: &[ModelState],
    pairs: &[SentencePair],
    target_vocab: &Vocabulary,
    config: &TrainingConfig,
    threads: usize,
) -> Result<(f64, f64), TrainError> {
    let hyps = run_pairs(threads, pairs.len(), |i| {
        let p = &pairs[i];
        greedy_decode(&p.source, &models[0].params, 2 * p.source.len() + 2)
    });
    let mut cands = Vec::with_capacity(pairs.len());
    for h in hyps {
        cands.push(target_vocab.decode(h?.words()));
    }
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|p| vec![target_vocab.decode(&p.target)]).collect();
    let bleu = metrics::bleu(&cands, &refs).map_err(|e| TrainError::Config(e.to_string()))?;
    let objective = match mode {
        Mode::Independent(_) => {
            let mut total = 0.0;
            for p in pairs {
                total += crate::model::sentence_log_likelihood(p, &models[0].params)?.0;
            }
            total
        }
        Mode::Joint => {
            let mut total = 0.0;
            for p in pairs {
                match agreement::joint_objective(
                    std::slice::from_ref(p),
                    &models[0].params,
                    &models[1].params,
                    config.lambda,
                    config.agreement_loss,
                ) {
                    Ok(v) => total += v.objective,
                    Err(AgreementError::Domain(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            total
        }
    };
    Ok((bleu, objective))
}

/// Trains `mode` on `corpus` until `config.max_epochs` epochs are done,
/// continuing from `state` when given (otherwise from fresh parameters).
pub fn train(
    mode: Mode,
    corpus: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainingConfig,
    state: Option<TrainState>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut state = match state {
        Some(s) => {
            if s.mode != mode {
                return Err(TrainError::Resume(format!("state is for {} but {mode} was requested", s.mode)));
            }
            s
        }
        None => TrainState::fresh(mode, corpus_dims(corpus, config), config.seed),
    };
    let (pairs, _) = oriented(mode, corpus);
    let valid_data = valid.filter(|v| !v.is_empty()).map(|v| oriented(mode, v));
    let joint_lambda = match (mode, config.agreement_loss) {
        (Mode::Joint, Some(_)) => config.lambda,
        _ => 0.0,
    };
    if mode == Mode::Joint && joint_lambda == 0.0 {
        log::warn!("joint training with lambda 0 (or no agreement loss): the agreement term is inert");
    }
    let threads = worker_threads();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let mut trajectories = vec![Vec::new(); state.models.len()];

    while state.epochs_done < config.max_epochs {
        let epoch = state.epochs_done + 1;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x100_0000_01b3) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            steps: 0,
            pairs: 0,
            skipped: 0,
            tokens: [0, 0],
            ll_forward: 0.0,
            ll_backward: 0.0,
            delta: 0.0,
            lambda: joint_lambda,
            objective: 0.0,
            valid_bleu: None,
            valid_objective: None,
            elapsed_secs: 0.0,
        };
        for batch in order.chunks(config.batch_size) {
            let models = &state.models;
            let results = pool.install(|| {
                run_pairs(threads, batch.len(), |k| pair_pass(mode, models, &pairs[batch[k]], config))
            });
            let mut sums: Vec<Vec<Array>> =
                models.iter().map(|m| m.params.tensors().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect()).collect();
            let (mut used, mut skipped) = (0usize, 0usize);
            let mut batch_objective = 0.0;
            for r in results {
                match r {
                    Ok(p) => {
                        used += 1;
                        rec.ll_forward += p.ll[0];
                        rec.ll_backward += p.ll[1];
                        rec.tokens[0] += p.tokens[0];
                        rec.tokens[1] += p.tokens[1];
                        let d = if config.agreement_loss.is_some() { p.delta.unwrap_or(0.0) } else { 0.0 };
                        rec.delta += d;
                        batch_objective += p.ll[0] + p.ll[1] - joint_lambda * d;
                        for (sum, grads) in sums.iter_mut().zip(p.grads) {
                            for (s, g) in sum.iter_mut().zip(grads) {
                                if let Some(g) = g {
                                    s.add_assign(&g);
                                }
                            }
                        }
                    }
                    Err(AgreementError::Domain(_)) => skipped += 1,
                    Err(e) => return Err(e.into()),
                }
            }
            let step = state.steps_done + 1;
            if skipped * 100 > batch.len() {
                return Err(TrainError::TooManySkipped { epoch, step, skipped, batch: batch.len() });
            }
            rec.skipped += skipped;
            rec.pairs += used;
            if !batch_objective.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "batch objective {batch_objective}; epoch so far ll_forward {} ll_backward {} delta {}",
                        rec.ll_forward, rec.ll_backward, rec.delta
                    ),
                });
            }
            // minimize −J averaged over the batch
            let scale = -1.0 / used as f64;
            for (i, (m, sum)) in state.models.iter_mut().zip(&mut sums).enumerate() {
                for s in sum.iter_mut() {
                    for x in s.data_mut() {
                        *x *= scale;
                    }
                }
                let grads: Vec<&Array> = sum.iter().collect();
                optimizer_step(m.params.tensors_mut(), &grads, &mut m.adam, config.learning_rate, config.clip_norm)
                    .map_err(|e| TrainError::Diverged { epoch, step, detail: format!("{} model: {e}", m.direction.name()) })?;
                if !m.params.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        detail: format!("{} model parameters became non-finite", m.direction.name()),
                    });
                }
                trajectories[i].push(parameter_digest(&m.params));
            }
            state.steps_done = step;
            rec.steps += 1;
        }
        rec.objective = rec.ll_forward + rec.ll_backward - rec.lambda * rec.delta;
        if let Some((vpairs, vvocab)) = &valid_data {
            if epoch % config.validation_interval == 0 || epoch == config.max_epochs {
                let (bleu, objective) = pool.install(|| validate(mode, &state.models, vpairs, vvocab, config, threads))?;
                rec.valid_bleu = Some(bleu);
                rec.valid_objective = Some(objective);
                let better = match &state.best {
                    None => true,
                    Some(b) => bleu > b.bleu || (bleu == b.bleu && objective > b.objective),
                };
                if better {
                    state.best = Some(Selection {
                        epoch,
                        bleu,
                        objective,
                        params: state.models.iter().map(|m| m.params.clone()).collect(),
                    });
                }
            }
        }
        rec.elapsed_secs = started.elapsed().as_secs_f64();
        log::info!(
            "{mode} epoch {epoch}: objective {:.3} xent {:.4} delta {:.3} valid bleu {} ({:.1}s)",
            rec.objective,
            rec.cross_entropy(),
            rec.delta,
            opt_field(rec.valid_bleu),
            rec.elapsed_secs
        );
        state.history.records.push(rec);
        state.epochs_done = epoch;
    }
    Ok(TrainOutcome { state, trajectories })
}

/// Forward direction on its own likelihood.
pub fn train_independent(
    corpus: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainingConfig,
) -> Result<TrainOutcome, TrainError> {
    train(Mode::Independent(Direction::Forward), corpus, valid, config, None)
}

/// Both directions on `J = Σ ll_f + Σ ll_b − λ Σ Δ`, updated together.
pub fn train_joint(
    corpus: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainingConfig,
) -> Result<TrainOutcome, TrainError> {
    train(Mode::Joint, corpus, valid, config, None)
}

/// Loss kind shorthand for configs built in code.
pub fn with_loss(mut config: TrainingConfig, kind: Option<LossKind>, lambda: f64) -> TrainingConfig {
    config.agreement_loss = kind;
    config.lambda = lambda;
    config
}
