//! Corpus BLEU, alignment error rate, attention entropy and paired bootstrap
//! resampling.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decode::LinkSet;
use crate::model::AlignmentMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no candidates to score")]
    Empty,
    #[error("{candidates} candidates but {references} reference sets")]
    CountMismatch { candidates: usize, references: usize },
    #[error("token {0:?} does not occur in the alignments")]
    AbsentToken(String),
    #[error("target position {n} outside an alignment with {rows} rows")]
    RowOutOfRange { n: usize, rows: usize },
}

pub const BLEU_MAX_N: usize = 4;

/// Sufficient statistics of one or more candidates; they add up across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_N],
    pub totals: [usize; BLEU_MAX_N],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// BLEU × 100 with uniform weights, no smoothing.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..BLEU_MAX_N)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / BLEU_MAX_N as f64;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

fn fold<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

/// Case-folded statistics of one candidate against its references. The
/// reference length is the one closest to the candidate, shorter on ties.
pub fn sentence_stats<S: AsRef<str>, R: AsRef<[S]>>(candidate: &[S], references: &[R]) -> BleuStats {
    let cand = fold(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| fold(r.as_ref())).collect();
    let mut stats = BleuStats { candidate_len: cand.len(), ..Default::default() };
    stats.reference_len = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(cand.len()), l))
        .unwrap_or(0);
    for n in 1..=BLEU_MAX_N {
        let counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
        stats.matches[n - 1] =
            counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    stats
}

/// Corpus-level case-insensitive BLEU-4 in [0, 100].
pub fn bleu<S, C, R, Rs>(candidates: &[C], reference_sets: &[Rs]) -> Result<f64, MetricsError>
where
    S: AsRef<str>,
    C: AsRef<[S]>,
    R: AsRef<[S]>,
    Rs: AsRef<[R]>,
{
    corpus_stats(candidates, reference_sets).map(|s| s.score())
}

fn per_sentence<S, C, R, Rs>(candidates: &[C], reference_sets: &[Rs]) -> Result<Vec<BleuStats>, MetricsError>
where
    S: AsRef<str>,
    C: AsRef<[S]>,
    R: AsRef<[S]>,
    Rs: AsRef<[R]>,
{
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    if candidates.len() != reference_sets.len() {
        return Err(MetricsError::CountMismatch { candidates: candidates.len(), references: reference_sets.len() });
    }
    Ok(candidates.iter().zip(reference_sets).map(|(c, r)| sentence_stats(c.as_ref(), r.as_ref())).collect())
}

pub fn corpus_stats<S, C, R, Rs>(candidates: &[C], reference_sets: &[Rs]) -> Result<BleuStats, MetricsError>
where
    S: AsRef<str>,
    C: AsRef<[S]>,
    R: AsRef<[S]>,
    Rs: AsRef<[R]>,
{
    let mut total = BleuStats::default();
    for s in per_sentence(candidates, reference_sets)? {
        total.add(&s);
    }
    Ok(total)
}

/// Link counts behind AER; they add up across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AerCounts {
    pub predicted: usize,
    pub sure: usize,
    pub predicted_and_sure: usize,
    pub predicted_and_possible: usize,
}

impl AerCounts {
    /// Counts for one sentence; sure links are added to the possible set.
    pub fn new(predicted: &LinkSet, sure: &LinkSet, possible: &LinkSet) -> Self {
        AerCounts {
            predicted: predicted.len(),
            sure: sure.len(),
            predicted_and_sure: predicted.intersection(sure).count(),
            predicted_and_possible: predicted.iter().filter(|l| sure.contains(l) || possible.contains(l)).count(),
        }
    }

    pub fn add(&mut self, other: &AerCounts) {
        self.predicted += other.predicted;
        self.sure += other.sure;
        self.predicted_and_sure += other.predicted_and_sure;
        self.predicted_and_possible += other.predicted_and_possible;
    }

    /// `1 − (|A∩S| + |A∩P|) / (|A| + |S|)`; 0 when both sets are empty.
    pub fn aer(&self) -> f64 {
        let denom = self.predicted + self.sure;
        if denom == 0 {
            log::warn!("AER of empty predicted and sure sets taken as 0");
            return 0.0;
        }
        1.0 - (self.predicted_and_sure + self.predicted_and_possible) as f64 / denom as f64
    }
}

pub fn aer(predicted: &LinkSet, sure: &LinkSet, possible: &LinkSet) -> f64 {
    AerCounts::new(predicted, sure, possible).aer()
}

/// Corpus AER from summed counts over `(predicted, sure, possible)` triples.
pub fn corpus_aer<'a, I>(sentences: I) -> f64
where
    I: IntoIterator<Item = (&'a LinkSet, &'a LinkSet, &'a LinkSet)>,
{
    let mut total = AerCounts::default();
    for (a, s, p) in sentences {
        total.add(&AerCounts::new(a, s, p));
    }
    total.aer()
}

/// `−Σ p log p` in nats, with `0 log 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of the attention row for target position `n`.
pub fn attention_entropy(a: &AlignmentMatrix, n: usize) -> Result<f64, MetricsError> {
    if n >= a.rows() {
        return Err(MetricsError::RowOutOfRange { n, rows: a.rows() });
    }
    Ok(row_entropy(a.row(n)))
}

/// One alignment matrix with the target ids of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTarget {
    pub alignment: AlignmentMatrix,
    /// Id per row; rows beyond this sequence (such as EOS) are ignored.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRecord {
    pub token: String,
    pub frequency: usize,
    /// Mean attention entropy over all occurrences, in nats.
    pub average_entropy: f64,
}

/// Sum of entropies and occurrence count per target id.
pub fn entropy_totals(items: &[AlignedTarget]) -> BTreeMap<usize, (f64, usize)> {
    let mut totals = BTreeMap::new();
    for item in items {
        for (n, &y) in item.target.iter().enumerate().take(item.alignment.rows()) {
            let e = totals.entry(y).or_insert((0.0, 0));
            e.0 += row_entropy(item.alignment.row(n));
            e.1 += 1;
        }
    }
    totals
}

/// Mean attention entropy over every occurrence of `y`.
pub fn average_attention_entropy(
    items: &[AlignedTarget],
    y: usize,
    token: &str,
) -> Result<EntropyRecord, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0;
    for item in items {
        for (n, &id) in item.target.iter().enumerate().take(item.alignment.rows()) {
            if id == y {
                sum += row_entropy(item.alignment.row(n));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::AbsentToken(token.to_string()));
    }
    Ok(EntropyRecord { token: token.to_string(), frequency: count, average_entropy: sum / count as f64 })
}

/// Mean entropy over every target row covered by `items`.
pub fn mean_attention_entropy(items: &[AlignedTarget]) -> f64 {
    let (sum, count) = entropy_totals(items).values().fold((0.0, 0), |(s, c), &(es, ec)| (s + es, c + ec));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FrequencyBand {
    High,
    Medium,
    Low,
}

impl FrequencyBand {
    pub fn name(self) -> &'static str {
        match self {
            FrequencyBand::High => "high",
            FrequencyBand::Medium => "medium",
            FrequencyBand::Low => "low",
        }
    }
}

/// One row of the independent-versus-joint entropy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyComparison {
    pub token: String,
    pub band: FrequencyBand,
    pub frequency: usize,
    pub independent: f64,
    pub joint: f64,
}

/// Per-word average entropies of two systems on the same targets, sorted by
/// descending frequency then token. Bands split the word list into terciles
/// by that order.
pub fn entropy_table(
    independent: &[AlignedTarget],
    joint: &[AlignedTarget],
    spell: impl Fn(usize) -> String,
) -> Vec<EntropyComparison> {
    let a = entropy_totals(independent);
    let b = entropy_totals(joint);
    let mut rows: Vec<EntropyComparison> = a
        .iter()
        .filter_map(|(&y, &(sa, ca))| {
            let &(sb, cb) = b.get(&y)?;
            Some(EntropyComparison {
                token: spell(y),
                band: FrequencyBand::High,
                frequency: ca,
                independent: sa / ca as f64,
                joint: sb / cb as f64,
            })
        })
        .collect();
    rows.sort_by(|x, y| y.frequency.cmp(&x.frequency).then_with(|| x.token.cmp(&y.token)));
    let k = rows.len();
    for (i, r) in rows.iter_mut().enumerate() {
        r.band = match 3 * i / k.max(1) {
            0 => FrequencyBand::High,
            1 => FrequencyBand::Medium,
            _ => FrequencyBand::Low,
        };
    }
    rows
}

/// Paired bootstrap: the fraction of `resamples` sentence resamplings in
/// which system B scores at least as high as system A.
pub fn paired_bootstrap<S, C, R, Rs>(
    cand_a: &[C],
    cand_b: &[C],
    references: &[Rs],
    resamples: usize,
    seed: u64,
) -> Result<f64, MetricsError>
where
    S: AsRef<str>,
    C: AsRef<[S]>,
    R: AsRef<[S]>,
    Rs: AsRef<[R]>,
{
    if cand_a.len() != cand_b.len() {
        return Err(MetricsError::CountMismatch { candidates: cand_b.len(), references: cand_a.len() });
    }
    let sa = per_sentence(cand_a, references)?;
    let sb = per_sentence(cand_b, references)?;
    if resamples == 0 {
        return Err(MetricsError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sa.len();
    let mut wins = 0;
    for _ in 0..resamples {
        let (mut ta, mut tb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        if tb.score() >= ta.score() {
            wins += 1;
        }
    }
    Ok(wins as f64 / resamples as f64)
}
