//! Greedy and beam search, force-decoding, one-to-one link extraction and
//! unknown-word replacement.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io;
use std::path::Path;

use crate::autodiff::Array;
use crate::corpus::{SentencePair, EOS, UNK, BOS};
use crate::model::{self, AlignmentMatrix, EncodedSource, ModelError, ModelParameters};

/// `(m, n)` links: source index `m`, target index `n`.
pub type LinkSet = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, ending in EOS unless cut off by the length limit.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Attention row used for each emitted token.
    pub alignment: Vec<Vec<f64>>,
}

impl Hypothesis {
    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Emitted ids without the final EOS.
    pub fn words(&self) -> &[usize] {
        if self.ends_with_eos() {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn alignment_matrix(&self) -> Option<AlignmentMatrix> {
        if self.alignment.is_empty() {
            return None;
        }
        let cols = self.alignment[0].len();
        let data = self.alignment.concat();
        let a = AlignmentMatrix::new(Array::new([self.alignment.len(), cols], data).ok()?).ok()?.with_eos_col();
        Some(if self.ends_with_eos() { a.with_eos_row() } else { a })
    }
}

struct Partial {
    hyp: Hypothesis,
    state: Array,
}

fn with_eos(x: &[usize]) -> Vec<usize> {
    x.iter().copied().chain([EOS]).collect()
}

/// Index of the largest entry, ties toward the smallest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax chain: at each step emit the most probable id (smallest on ties).
pub fn greedy_decode(x: &[usize], params: &ModelParameters, max_len: usize) -> Result<Hypothesis, ModelError> {
    let h = model::encode(&with_eos(x), params)?;
    let mut state = model::initial_state(&h, params)?;
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, alignment: Vec::new() };
    let mut prev = BOS;
    while hyp.tokens.len() < max_len {
        let out = model::step(&h, &state, prev, params)?;
        let y = argmax(out.probs.data());
        hyp.log_prob += out.probs.get(0, y).ln();
        hyp.tokens.push(y);
        hyp.alignment.push(out.attention.into_data());
        state = out.state;
        prev = y;
        if y == EOS {
            break;
        }
    }
    Ok(hyp)
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over raw log-probabilities (no length normalization).
/// Returns the better of the beam result and the greedy chain, so widening
/// the beam never lowers the returned score.
pub fn beam_decode(
    x: &[usize],
    params: &ModelParameters,
    beam_width: usize,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let greedy = greedy_decode(x, params, max_len)?;
    if beam_width <= 1 || max_len == 0 {
        return Ok(greedy);
    }
    let h = model::encode(&with_eos(x), params)?;
    let beam = search(&h, params, beam_width, max_len)?;
    Ok(match beam {
        Some(b) if b.log_prob >= greedy.log_prob => b,
        _ => greedy,
    })
}

fn search(
    h: &EncodedSource,
    params: &ModelParameters,
    width: usize,
    max_len: usize,
) -> Result<Option<Hypothesis>, ModelError> {
    let start = model::initial_state(h, params)?;
    let mut active = vec![Partial {
        hyp: Hypothesis { tokens: Vec::new(), log_prob: 0.0, alignment: Vec::new() },
        state: start,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !active.is_empty() {
        let mut candidates: Vec<(Hypothesis, Array)> = Vec::new();
        for p in &active {
            let prev = p.hyp.tokens.last().copied().unwrap_or(BOS);
            let out = model::step(h, &p.state, prev, params)?;
            let probs = out.probs.data();
            let mut ids: Vec<usize> = (0..probs.len()).collect();
            ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &y in ids.iter().take(width) {
                let mut hyp = p.hyp.clone();
                hyp.tokens.push(y);
                hyp.log_prob += probs[y].ln();
                hyp.alignment.push(out.attention.data().to_vec());
                candidates.push((hyp, out.state.clone()));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(width);
        active.clear();
        for (hyp, state) in candidates {
            if hyp.ends_with_eos() || hyp.tokens.len() >= max_len {
                finished.push(hyp);
            } else {
                active.push(Partial { hyp, state });
            }
        }
        finished.sort_by(rank);
        finished.truncate(width);
        // Scores only decrease as tokens are appended.
        if finished.len() >= width {
            let worst_kept = finished[width - 1].log_prob;
            if active.iter().all(|p| p.hyp.log_prob < worst_kept) {
                break;
            }
        }
    }
    Ok(finished.into_iter().next())
}

/// Teacher-forced attention matrix for a known pair, EOS row included.
pub fn force_decode(pair: &SentencePair, params: &ModelParameters) -> Result<AlignmentMatrix, ModelError> {
    model::sentence_log_likelihood(pair, params).map(|(_, a)| a)
}

/// Per-target-word argmax over source word positions; the EOS row and
/// column take no part.
pub fn extract_one_to_one(a: &AlignmentMatrix) -> LinkSet {
    if a.word_cols() == 0 {
        return LinkSet::new();
    }
    (0..a.word_rows()).map(|n| (argmax(&a.row(n)[..a.word_cols()]), n)).collect()
}

/// Source-to-target word translations for unknown-word replacement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    map: HashMap<String, String>,
}

impl Lexicon {
    /// From `(source, target)` pairs; the first entry for a source word wins.
    pub fn from_pairs<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut map = HashMap::new();
        for (s, t) in pairs {
            map.entry(s.into()).or_insert_with(|| t.into());
        }
        Lexicon { map }
    }

    /// Reads `source<TAB>target` lines; blank lines are skipped.
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: expected two tab-separated columns", i + 1))
            })?;
            pairs.push((s.trim().to_string(), t.trim().to_string()));
        }
        Ok(Lexicon::from_pairs(pairs))
    }

    pub fn get(&self, source: &str) -> Option<&str> {
        self.map.get(source).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Spells out the hypothesis words, replacing each UNK with the translation
/// (or a copy) of the source word its attention row peaks on. The source EOS
/// column is never chosen.
pub fn replace_unknowns(
    hyp: &Hypothesis,
    source: &[String],
    spell: impl Fn(usize) -> String,
    lexicon: Option<&Lexicon>,
) -> Vec<String> {
    hyp.words()
        .iter()
        .enumerate()
        .map(|(n, &id)| {
            if id != UNK || source.is_empty() {
                return spell(id);
            }
            let row = &hyp.alignment[n];
            let m = argmax(&row[..source.len().min(row.len())]);
            let word = &source[m];
            lexicon.and_then(|l| l.get(word)).map(str::to_string).unwrap_or_else(|| word.clone())
        })
        .collect()
}
