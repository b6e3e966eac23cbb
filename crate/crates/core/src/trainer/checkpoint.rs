//! Binary checkpoint of one direction: config, vocabularies, selected
//! parameters, history, and optionally the state needed to resume training.
//!
//! Layout: magic `BIATTNCK`, u32 version, then length-prefixed fields. All
//! integers are u64 little-endian unless noted; floats are raw IEEE-754 bits.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Array;
use crate::corpus::Vocabulary;
use crate::model::{ModelDims, ModelParameters, TENSOR_NAMES};

use super::{Adam, Direction, Mode, ModelState, Selection, TrainState, TrainingConfig, TrainingHistory};

pub const MAGIC: &[u8; 8] = b"BIATTNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Resume block: current parameters, optimizer state and selection bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub epochs_done: u64,
    pub steps_done: u64,
    pub current: ModelParameters,
    pub adam: Adam,
    /// `(epoch, bleu, objective)` of the selected model, if any.
    pub selected: Option<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub mode: Mode,
    pub direction: Direction,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    /// Parameters used for inference (the validation-selected ones).
    pub params: ModelParameters,
    pub history: TrainingHistory,
    pub resume: Option<ResumeState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, a: &Array) {
        self.u64(a.rows() as u64);
        self.u64(a.cols() as u64);
        for &x in a.data() {
            self.f64(x);
        }
    }
    fn params(&mut self, p: &ModelParameters) {
        for (name, t) in TENSOR_NAMES.iter().zip(p.tensors()) {
            self.str(name);
            self.array(t);
        }
    }
    fn vocab(&mut self, v: &Vocabulary) {
        self.u64(v.words().len() as u64);
        for w in v.words() {
            self.str(w);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.buf.len(), what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        // lengths can never exceed the remaining bytes
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(CheckpointError::Truncated { offset: self.buf.len(), what });
        }
        Ok(n as usize)
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn str(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }
    fn array(&mut self, what: &'static str) -> Result<Array, CheckpointError> {
        let rows = self.u64(what)? as usize;
        let cols = self.u64(what)? as usize;
        let n = rows.checked_mul(cols).filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos));
        let n = n.ok_or(CheckpointError::Truncated { offset: self.buf.len(), what })?;
        let data: Vec<f64> = self
            .take(n * 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Array::new([rows, cols], data).map_err(|e| CheckpointError::Corrupt(format!("{what}: {e}")))
    }
    fn params(&mut self, dims: ModelDims) -> Result<ModelParameters, CheckpointError> {
        let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
        for expected in TENSOR_NAMES {
            let name = self.str("tensor name")?;
            if name != expected {
                return Err(CheckpointError::Corrupt(format!("expected tensor {expected}, found {name}")));
            }
            tensors.push(self.array("tensor data")?);
        }
        let p = ModelParameters::from_tensors(dims, tensors).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        p.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(p)
    }
    fn vocab(&mut self) -> Result<Vocabulary, CheckpointError> {
        let n = self.len("vocabulary size")?;
        let words = (0..n).map(|_| self.str("vocabulary word")).collect::<Result<Vec<_>, _>>()?;
        Ok(Vocabulary::from_tokens(words))
    }
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.config.to_text());
        w.str(&self.mode.to_string());
        w.str(self.direction.name());
        w.vocab(&self.source_vocab);
        w.vocab(&self.target_vocab);
        let d = self.params.dims;
        for v in [d.source_vocab, d.target_vocab, d.embed, d.hidden] {
            w.u64(v as u64);
        }
        w.params(&self.params);
        w.str(&self.history.to_tsv());
        match &self.resume {
            None => w.0.push(0),
            Some(r) => {
                w.0.push(1);
                w.u64(r.epochs_done);
                w.u64(r.steps_done);
                match r.selected {
                    None => w.0.push(0),
                    Some((e, b, o)) => {
                        w.0.push(1);
                        w.u64(e);
                        w.f64(b);
                        w.f64(o);
                    }
                }
                w.params(&r.current);
                w.u64(r.adam.step);
                for a in r.adam.m.iter().chain(&r.adam.v) {
                    w.array(a);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < MAGIC.len() && MAGIC.starts_with(buf) {
            return Err(CheckpointError::Truncated { offset: buf.len(), what: "magic" });
        }
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let corrupt = |e: String| CheckpointError::Corrupt(e);
        let config = TrainingConfig::from_text(&r.str("config")?).map_err(|e| corrupt(e.to_string()))?;
        let mode: Mode = r.str("mode")?.parse().map_err(|e: super::TrainError| corrupt(e.to_string()))?;
        let direction: Direction =
            r.str("direction")?.parse().map_err(|e: super::TrainError| corrupt(e.to_string()))?;
        let source_vocab = r.vocab()?;
        let target_vocab = r.vocab()?;
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = r.u64("dimensions")? as usize;
        }
        let dims = ModelDims { source_vocab: d[0], target_vocab: d[1], embed: d[2], hidden: d[3] };
        if dims.source_vocab != source_vocab.len() || dims.target_vocab != target_vocab.len() {
            return Err(corrupt("vocabulary sizes disagree with model dimensions".into()));
        }
        let params = r.params(dims)?;
        let history = TrainingHistory::from_tsv(&r.str("history")?).map_err(corrupt)?;
        let resume = match r.u8("resume flag")? {
            0 => None,
            1 => {
                let epochs_done = r.u64("epochs")?;
                let steps_done = r.u64("steps")?;
                let selected = match r.u8("selection flag")? {
                    0 => None,
                    1 => Some((r.u64("selection")?, r.f64("selection")?, r.f64("selection")?)),
                    f => return Err(corrupt(format!("selection flag {f}"))),
                };
                let current = r.params(dims)?;
                let step = r.u64("optimizer step")?;
                let mut moments = Vec::with_capacity(2 * TENSOR_NAMES.len());
                for (i, t) in current.tensors().iter().cycle().take(2 * TENSOR_NAMES.len()).enumerate() {
                    let a = r.array("optimizer moment")?;
                    if a.shape() != t.shape() {
                        return Err(corrupt(format!("optimizer moment {i} has shape {:?}", a.shape())));
                    }
                    moments.push(a);
                }
                let v = moments.split_off(TENSOR_NAMES.len());
                Some(ResumeState { epochs_done, steps_done, current, adam: Adam { step, m: moments, v }, selected })
            }
            f => return Err(corrupt(format!("resume flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { config, mode, direction, source_vocab, target_vocab, params, history, resume })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

impl TrainState {
    /// One checkpoint per model. `source_vocab`/`target_vocab` are the
    /// vocabularies of the forward direction.
    pub fn to_checkpoints(
        &self,
        config: &TrainingConfig,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
    ) -> Vec<Checkpoint> {
        self.models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let (sv, tv) = match m.direction {
                    Direction::Forward => (source_vocab, target_vocab),
                    Direction::Backward => (target_vocab, source_vocab),
                };
                Checkpoint {
                    config: config.clone(),
                    mode: self.mode,
                    direction: m.direction,
                    source_vocab: sv.clone(),
                    target_vocab: tv.clone(),
                    params: self.selected(i).clone(),
                    history: self.history.clone(),
                    resume: Some(ResumeState {
                        epochs_done: self.epochs_done as u64,
                        steps_done: self.steps_done,
                        current: m.params.clone(),
                        adam: m.adam.clone(),
                        selected: self.best.as_ref().map(|b| (b.epoch as u64, b.bleu, b.objective)),
                    }),
                }
            })
            .collect()
    }

    /// Rebuilds the state from checkpoints written by [`TrainState::to_checkpoints`],
    /// given in [`Mode::directions`] order.
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self, super::TrainError> {
        let bad = |m: &str| super::TrainError::Resume(m.to_string());
        let first = checkpoints.first().ok_or_else(|| bad("no checkpoints given"))?;
        let mode = first.mode;
        let dirs = mode.directions();
        if checkpoints.len() != dirs.len() {
            return Err(bad("checkpoint count does not match the training mode"));
        }
        let mut models = Vec::new();
        let mut best_params = Vec::new();
        let r0 = first.resume.as_ref().ok_or_else(|| bad("checkpoint has no resume state"))?;
        for (c, d) in checkpoints.iter().zip(dirs) {
            let r = c.resume.as_ref().ok_or_else(|| bad("checkpoint has no resume state"))?;
            if c.mode != mode || c.direction != d || r.epochs_done != r0.epochs_done || r.steps_done != r0.steps_done {
                return Err(bad("checkpoints come from different runs"));
            }
            models.push(ModelState { direction: d, params: r.current.clone(), adam: r.adam.clone() });
            best_params.push(c.params.clone());
        }
        Ok(TrainState {
            mode,
            epochs_done: r0.epochs_done as usize,
            steps_done: r0.steps_done,
            models,
            best: r0.selected.map(|(epoch, bleu, objective)| Selection {
                epoch: epoch as usize,
                bleu,
                objective,
                params: best_params,
            }),
            history: first.history.clone(),
        })
    }
}
