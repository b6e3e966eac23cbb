//! Parallel corpora: vocabularies, whitespace-tokenized ingestion, Pharaoh
//! gold alignments, direction reversal and synthetic language pairs.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<unk>", "<s>", "</s>", "<pad>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot build a vocabulary from an empty token stream")]
    EmptyStream,
    #[error("vocabulary cap must be at least {NUM_RESERVED}, got {0}")]
    CapTooSmall(usize),
    #[error("line counts differ: {source_lines} source lines vs {target_lines} target lines")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
    #[error("gold alignment has {gold_lines} lines for {pairs} sentence pairs")]
    GoldLineCount { gold_lines: usize, pairs: usize },
    #[error("line {line}: bad alignment link {link:?}")]
    Pharaoh { line: usize, link: String },
    #[error("line {line}: link {source_pos}-{target_pos} outside a {source_len}x{target_len} pair")]
    LinkOutOfBounds { line: usize, source_pos: usize, target_pos: usize, source_len: usize, target_len: usize },
    #[error("unknown synthetic task {0:?} (expected copy, reverse or swap)")]
    UnknownTask(String),
    #[error("invalid synthetic settings: {0}")]
    Synthetic(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Token ↔ id bijection. Ids `0..4` are reserved for
/// `<unk>`, `<s>`, `</s>`, `<pad>`; corpus tokens start at 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap − 4` most frequent tokens, ties broken by first occurrence.
    pub fn build<I, S>(stream: I, cap: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if cap < NUM_RESERVED {
            return Err(CorpusError::CapTooSmall(cap));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for tok in stream {
            let tok = tok.as_ref();
            seen += 1;
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            let order = counts.len();
            counts.entry(tok.to_string()).or_insert((0, order)).0 += 1;
        }
        if seen == 0 {
            return Err(CorpusError::EmptyStream);
        }
        let mut ranked: Vec<(String, usize, usize)> =
            counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap - NUM_RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _, _)| t)))
    }

    /// Vocabulary over exactly these tokens, in order. Duplicates and
    /// reserved spellings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for tok in tokens {
            let tok = tok.into();
            if RESERVED_TOKENS.contains(&tok.as_str()) || v.index.contains_key(&tok) {
                continue;
            }
            v.index.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a corpus token; anything unknown (including reserved spellings) maps to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkKind {
    Sure,
    Possible,
}

/// Gold alignment link between source position `source` and target position `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub source: usize,
    pub target: usize,
    pub kind: LinkKind,
}

impl Link {
    pub fn sure(source: usize, target: usize) -> Self {
        Link { source, target, kind: LinkKind::Sure }
    }

    pub fn possible(source: usize, target: usize) -> Self {
        Link { source, target, kind: LinkKind::Possible }
    }

    pub fn transposed(self) -> Self {
        Link { source: self.target, target: self.source, kind: self.kind }
    }
}

/// Parses one Pharaoh line: `m-n` sure links and `m?n` possible links, 0-indexed.
pub fn parse_pharaoh(line: &str, line_no: usize) -> Result<Vec<Link>, CorpusError> {
    let mut links = Vec::new();
    for item in line.split_whitespace() {
        let (sep, kind) = if item.contains('-') {
            ('-', LinkKind::Sure)
        } else {
            ('?', LinkKind::Possible)
        };
        let bad = || CorpusError::Pharaoh { line: line_no, link: item.to_string() };
        let (m, n) = item.split_once(sep).ok_or_else(bad)?;
        let source = m.parse().map_err(|_| bad())?;
        let target = n.parse().map_err(|_| bad())?;
        links.push(Link { source, target, kind });
    }
    links.sort();
    links.dedup();
    Ok(links)
}

pub fn format_pharaoh(links: &[Link]) -> String {
    links
        .iter()
        .map(|l| match l.kind {
            LinkKind::Sure => format!("{}-{}", l.source, l.target),
            LinkKind::Possible => format!("{}?{}", l.source, l.target),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One tokenized, id-mapped sentence pair. Source and target do not carry
/// BOS/EOS; the model adds them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub gold: Option<Vec<Link>>,
}

impl SentencePair {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Self {
        SentencePair { source, target, gold: None }
    }

    pub fn reversed(&self) -> SentencePair {
        SentencePair {
            source: self.target.clone(),
            target: self.source.clone(),
            gold: self.gold.as_ref().map(|g| {
                let mut t: Vec<Link> = g.iter().map(|l| l.transposed()).collect();
                t.sort();
                t
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    /// Pairs dropped at load time for exceeding the length limit or being empty.
    pub dropped: usize,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_tokens(&self, i: usize) -> Vec<String> {
        self.source_vocab.decode(&self.pairs[i].source)
    }

    pub fn target_tokens(&self, i: usize) -> Vec<String> {
        self.target_vocab.decode(&self.pairs[i].target)
    }

    /// Source and target side written as plain text files, gold alignments
    /// (if every pair has them) as a Pharaoh file.
    pub fn write(&self, source: &Path, target: &Path, gold: Option<&Path>) -> Result<(), CorpusError> {
        let mut s = BufWriter::new(fs::File::create(source).map_err(io_err(source))?);
        let mut t = BufWriter::new(fs::File::create(target).map_err(io_err(target))?);
        for (i, _) in self.pairs.iter().enumerate() {
            writeln!(s, "{}", self.source_tokens(i).join(" ")).map_err(io_err(source))?;
            writeln!(t, "{}", self.target_tokens(i).join(" ")).map_err(io_err(target))?;
        }
        s.flush().map_err(io_err(source))?;
        t.flush().map_err(io_err(target))?;
        if let Some(path) = gold {
            let mut g = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
            for p in &self.pairs {
                writeln!(g, "{}", format_pharaoh(p.gold.as_deref().unwrap_or(&[]))).map_err(io_err(path))?;
            }
            g.flush().map_err(io_err(path))?;
        }
        Ok(())
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// All whitespace-separated tokens of a file, in order.
pub fn read_tokens(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.split_whitespace().map(str::to_string).collect())
}

pub fn read_pharaoh(path: &Path) -> Result<Vec<Vec<Link>>, CorpusError> {
    read_lines(path)?.iter().enumerate().map(|(i, l)| parse_pharaoh(l, i + 1)).collect()
}

pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    max_len: usize,
) -> Result<ParallelCorpus, CorpusError> {
    load_parallel_with_gold(source_path, target_path, None, source_vocab, target_vocab, max_len)
}

/// Like [`load_parallel`], additionally attaching one Pharaoh line per pair.
pub fn load_parallel_with_gold(
    source_path: &Path,
    target_path: &Path,
    gold_path: Option<&Path>,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    max_len: usize,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch { source_lines: src.len(), target_lines: tgt.len() });
    }
    let gold = match gold_path {
        Some(p) => {
            let g = read_pharaoh(p)?;
            if g.len() != src.len() {
                return Err(CorpusError::GoldLineCount { gold_lines: g.len(), pairs: src.len() });
            }
            Some(g)
        }
        None => None,
    };
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let s: Vec<&str> = s.split_whitespace().collect();
        let t: Vec<&str> = t.split_whitespace().collect();
        if s.is_empty() || t.is_empty() || s.len() > max_len || t.len() > max_len {
            dropped += 1;
            continue;
        }
        let links = match &gold {
            Some(g) => {
                for l in &g[i] {
                    if l.source >= s.len() || l.target >= t.len() {
                        return Err(CorpusError::LinkOutOfBounds {
                            line: i + 1,
                            source_pos: l.source,
                            target_pos: l.target,
                            source_len: s.len(),
                            target_len: t.len(),
                        });
                    }
                }
                Some(g[i].clone())
            }
            None => None,
        };
        pairs.push(SentencePair {
            source: source_vocab.encode(&s),
            target: target_vocab.encode(&t),
            gold: links,
        });
    }
    Ok(ParallelCorpus {
        pairs,
        source_vocab: source_vocab.clone(),
        target_vocab: target_vocab.clone(),
        dropped,
    })
}

/// Swaps the translation direction: sides, vocabularies and gold links.
pub fn reverse_corpus(corpus: &ParallelCorpus) -> ParallelCorpus {
    ParallelCorpus {
        pairs: corpus.pairs.iter().map(SentencePair::reversed).collect(),
        source_vocab: corpus.target_vocab.clone(),
        target_vocab: corpus.source_vocab.clone(),
        dropped: corpus.dropped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticTask {
    /// Target repeats the source.
    Copy,
    /// Target is the source read backwards.
    Reverse,
    /// Every word goes through a fixed bijective lexicon, and a "modifier"
    /// followed by a non-modifier swaps places with it.
    LexiconSwapWithLocalReorder,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::LexiconSwapWithLocalReorder => "swap",
        }
    }
}

impl std::str::FromStr for SyntheticTask {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim_end_matches("-task") {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "swap" | "lexicon_swap_with_local_reorder" | "lexicon-swap" => {
                Ok(SyntheticTask::LexiconSwapWithLocalReorder)
            }
            _ => Err(CorpusError::UnknownTask(s.to_string())),
        }
    }
}

/// Fixed per vocabulary size so independently seeded splits share one language pair.
const LEXICON_SEED: u64 = 0x5eed_1e71_c0de;

struct SwapRule {
    lexicon: Vec<usize>,
}

impl SwapRule {
    fn new(vocab_size: usize) -> Self {
        let mut lexicon: Vec<usize> = (0..vocab_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED ^ vocab_size as u64);
        lexicon.shuffle(&mut rng);
        SwapRule { lexicon }
    }

    fn is_modifier(word: usize) -> bool {
        word.is_multiple_of(3)
    }

    /// Target position of every source position.
    fn positions(words: &[usize]) -> Vec<usize> {
        let mut pos: Vec<usize> = (0..words.len()).collect();
        let mut i = 0;
        while i + 1 < words.len() {
            if Self::is_modifier(words[i]) && !Self::is_modifier(words[i + 1]) {
                pos.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        pos
    }
}

fn synthetic_vocabs(task: SyntheticTask, vocab_size: usize) -> (Vocabulary, Vocabulary) {
    match task {
        SyntheticTask::Copy | SyntheticTask::Reverse => {
            let v = Vocabulary::from_tokens((0..vocab_size).map(|i| format!("w{i}")));
            (v.clone(), v)
        }
        SyntheticTask::LexiconSwapWithLocalReorder => (
            Vocabulary::from_tokens((0..vocab_size).map(|i| format!("s{i}"))),
            Vocabulary::from_tokens((0..vocab_size).map(|i| format!("t{i}"))),
        ),
    }
}

/// Deterministic synthetic corpus with sure gold links implied by the task.
///
/// Vocabularies list every task word whether or not it was sampled, so
/// corpora of the same task and `vocab_size` always share ids.
pub fn generate_synthetic(
    task: SyntheticTask,
    vocab_size: usize,
    num_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ParallelCorpus, CorpusError> {
    let (min_len, max_len) = len_range;
    if vocab_size < 8 {
        return Err(CorpusError::Synthetic(format!("vocab_size must be at least 8, got {vocab_size}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(CorpusError::Synthetic(format!("bad length range {min_len}..={max_len}")));
    }
    let (source_vocab, target_vocab) = synthetic_vocabs(task, vocab_size);
    let rule = SwapRule::new(vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let len = rng.gen_range(min_len..=max_len);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
        let positions: Vec<usize> = match task {
            SyntheticTask::Copy => (0..len).collect(),
            SyntheticTask::Reverse => (0..len).map(|m| len - 1 - m).collect(),
            SyntheticTask::LexiconSwapWithLocalReorder => SwapRule::positions(&words),
        };
        let mut target = vec![0; len];
        for (m, &n) in positions.iter().enumerate() {
            let word = match task {
                SyntheticTask::LexiconSwapWithLocalReorder => rule.lexicon[words[m]],
                _ => words[m],
            };
            target[n] = word + NUM_RESERVED;
        }
        let mut gold: Vec<Link> = positions.iter().enumerate().map(|(m, &n)| Link::sure(m, n)).collect();
        gold.sort();
        pairs.push(SentencePair {
            source: words.iter().map(|w| w + NUM_RESERVED).collect(),
            target,
            gold: Some(gold),
        });
    }
    Ok(ParallelCorpus { pairs, source_vocab, target_vocab, dropped: 0 })
}
