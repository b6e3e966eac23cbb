//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::agreement::LossKind;
use crate::corpus::{
    self, format_pharaoh, generate_synthetic, load_parallel, parse_pharaoh, read_lines, Link, LinkKind, ParallelCorpus,
    SentencePair, SyntheticTask, Vocabulary,
};
use crate::decode::{self, extract_one_to_one, force_decode, Lexicon, LinkSet};
use crate::metrics::{self, AlignedTarget};
use crate::model::AlignmentMatrix;
use crate::trainer::{self, Checkpoint, Direction, Mode, TrainState, TrainingConfig, TrainingHistory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "biattn", version, about = "Attention-based translation with bidirectional agreement training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with gold alignments.
    Synth(SynthArgs),
    /// Train both directions, independently or jointly.
    Train(TrainArgs),
    /// Translate a source file with a trained direction.
    Translate(TranslateArgs),
    /// Force-decode a parallel corpus and write one-to-one alignments.
    Align(AlignArgs),
    /// Score translations (BLEU) or alignments (AER).
    Eval(EvalArgs),
    /// Compare per-word attention entropy of an independent and a joint model.
    Analyze(AnalyzeArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
struct SyntheticArgs {
    /// Vocabulary size of generated corpora.
    #[arg(long, default_value_t = 30)]
    vocab_size: usize,
    /// Number of generated training pairs.
    #[arg(long, default_value_t = 3000)]
    pairs: usize,
    /// Sentence length range MIN:MAX.
    #[arg(long, default_value = "3:8")]
    len: String,
    /// Number of generated held-out pairs.
    #[arg(long, default_value_t = 300)]
    heldout: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// copy, reverse or swap.
    #[arg(long)]
    task: String,
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for train.{src,tgt,gold} and valid.{src,tgt,gold}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Independent,
    Joint,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// soa, sos, mul (or none).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// A synthetic task name (copy-task, reverse-task, swap-task) or a
    /// directory holding train.src/train.tgt and optionally valid.src/valid.tgt.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    valid_src: Option<PathBuf>,
    #[arg(long)]
    valid_tgt: Option<PathBuf>,
    /// Flat key = value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra config overrides, KEY=VALUE.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Directory with forward.ckpt/backward.ckpt to start from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    synthetic: SyntheticArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    /// A checkpoint file, or a directory whose forward.ckpt is used.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Output length limit, EOS included (default: twice the source length plus two).
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    replace_unk: bool,
    /// source<TAB>target word translations used by --replace-unk.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Also write Pharaoh links of each output to this file.
    #[arg(long)]
    emit_align: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Pharaoh output, one line per pair.
    #[arg(long)]
    out: PathBuf,
    /// Also write the soft attention matrices as TSV.
    #[arg(long)]
    soft_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Candidate translations for BLEU.
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// Reference translations for BLEU.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Second system for a paired bootstrap test against --hyp.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Score alignments instead of translations.
    #[arg(long)]
    aer: bool,
    /// Predicted Pharaoh alignments for AER.
    #[arg(long)]
    align: Option<PathBuf>,
    /// Gold Pharaoh alignments for AER.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Direction label written in the output.
    #[arg(long, default_value = "forward")]
    direction: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// TSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Independent-training checkpoint (file or directory).
    #[arg(long)]
    indep: PathBuf,
    /// Joint-training checkpoint (file or directory).
    #[arg(long)]
    joint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Replacement for the recorded --out.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What a command read and wrote; enough to run it again.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", self.version);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "wall_clock_secs = {}", self.wall_clock_secs);
        for a in &self.args {
            let _ = writeln!(s, "arg = {a}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        if let Some(c) = &self.config {
            for line in c.lines() {
                let _ = writeln!(s, "config.{line}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut m = RunManifest::default();
        let mut config = String::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| format!("manifest line {}: expected key = value", i + 1))?;
            match k {
                "command" => m.command = v.to_string(),
                "version" => m.version = v.to_string(),
                "seed" => m.seed = Some(v.parse().map_err(|_| format!("bad seed {v:?}"))?),
                "wall_clock_secs" => m.wall_clock_secs = v.parse().map_err(|_| format!("bad wall clock {v:?}"))?,
                "arg" => m.args.push(v.to_string()),
                "input" => m.inputs.push(PathBuf::from(v)),
                "output" => m.outputs.push(PathBuf::from(v)),
                _ => match k.strip_prefix("config.") {
                    Some(key) => {
                        let _ = writeln!(config, "{key} = {v}");
                    }
                    None => return Err(format!("unknown manifest key {k:?}")),
                },
            }
        }
        if m.command.is_empty() {
            return Err("manifest has no command".into());
        }
        m.config = (!config.is_empty()).then_some(config);
        Ok(m)
    }

    /// Writes to a temporary file and renames it over `path`.
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("manifest.tmp");
        fs::write(&tmp, self.to_text())?;
        fs::rename(&tmp, path)
    }
}

/// Manifest path for a file output.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    output.with_file_name(name)
}

struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(command: &str, args: &[String]) -> Self {
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                args: args.to_vec(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            },
            started: Instant::now(),
        }
    }

    fn finish(mut self, path: &Path) -> CliResult<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.write_atomic(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &raw) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(command: Command, raw: &[String]) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, raw),
        Command::Train(a) => cmd_train(a, raw),
        Command::Translate(a) => cmd_translate(a, raw),
        Command::Align(a) => cmd_align(a, raw),
        Command::Eval(a) => cmd_eval(a, raw),
        Command::Analyze(a) => cmd_analyze(a, raw),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn parse_len(s: &str) -> CliResult<(usize, usize)> {
    let bad = || usage(format!("--len expects MIN:MAX, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let range = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if range.0 == 0 || range.0 > range.1 {
        return Err(bad());
    }
    Ok(range)
}

fn synthetic_pair(
    task: SyntheticTask,
    s: &SyntheticArgs,
    seed: u64,
) -> CliResult<(ParallelCorpus, Option<ParallelCorpus>)> {
    let len = parse_len(&s.len)?;
    let train = generate_synthetic(task, s.vocab_size, s.pairs, len, seed).map_err(|e| usage(e.to_string()))?;
    let valid = if s.heldout > 0 {
        let held_seed = seed.wrapping_add(0x5eed);
        Some(generate_synthetic(task, s.vocab_size, s.heldout, len, held_seed).map_err(|e| usage(e.to_string()))?)
    } else {
        None
    };
    Ok((train, valid))
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: SynthArgs, raw: &[String]) -> CliResult<()> {
    let task: SyntheticTask = a.task.parse().map_err(|e: corpus::CorpusError| usage(e.to_string()))?;
    let (train, valid) = synthetic_pair(task, &a.synthetic, a.seed)?;
    mkdir(&a.out)?;
    let mut run = Run::new("synth", raw);
    run.manifest.seed = Some(a.seed);
    let mut write = |c: &ParallelCorpus, stem: &str| -> CliResult<()> {
        let paths = ["src", "tgt", "gold"].map(|ext| a.out.join(format!("{stem}.{ext}")));
        c.write(&paths[0], &paths[1], Some(&paths[2])).map_err(runtime)?;
        run.manifest.outputs.extend(paths);
        Ok(())
    };
    write(&train, "train")?;
    if let Some(v) = &valid {
        write(v, "valid")?;
    }
    run.finish(&a.out.join("manifest.txt"))
}

fn exists(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn vocab_from_files(path: &Path, cap: usize) -> CliResult<Vocabulary> {
    let lines = read_lines(path).map_err(runtime)?;
    Vocabulary::build(lines.iter().flat_map(|l| l.split_whitespace()), cap).map_err(runtime)
}

/// Training and validation corpora plus the paths they came from.
fn load_training_data(
    a: &TrainArgs,
    config: &TrainingConfig,
    seed: u64,
) -> CliResult<(ParallelCorpus, Option<ParallelCorpus>, Vec<PathBuf>)> {
    let files = match (&a.data, &a.src, &a.tgt) {
        (Some(d), None, None) => {
            if let Ok(task) = d.parse::<SyntheticTask>() {
                let (t, v) = synthetic_pair(task, &a.synthetic, seed)?;
                return Ok((t, v, Vec::new()));
            }
            let dir = PathBuf::from(d);
            if !dir.is_dir() {
                return Err(usage(format!("--data {d:?} is neither a synthetic task nor a directory")));
            }
            let valid = (dir.join("valid.src").is_file() && dir.join("valid.tgt").is_file())
                .then(|| (dir.join("valid.src"), dir.join("valid.tgt")));
            (dir.join("train.src"), dir.join("train.tgt"), valid)
        }
        (None, Some(s), Some(t)) => {
            let valid = match (&a.valid_src, &a.valid_tgt) {
                (Some(vs), Some(vt)) => Some((vs.clone(), vt.clone())),
                (None, None) => None,
                _ => return Err(usage("--valid-src and --valid-tgt go together")),
            };
            (s.clone(), t.clone(), valid)
        }
        _ => return Err(usage("give either --data or both --src and --tgt")),
    };
    let (src, tgt, valid) = files;
    exists(&src, "source corpus")?;
    exists(&tgt, "target corpus")?;
    let sv = vocab_from_files(&src, config.vocab_cap)?;
    let tv = vocab_from_files(&tgt, config.vocab_cap)?;
    let train = load_parallel(&src, &tgt, &sv, &tv, config.max_len).map_err(|e| match e {
        corpus::CorpusError::LineCountMismatch { .. } => usage(e.to_string()),
        e => runtime(e),
    })?;
    if train.dropped > 0 {
        log::warn!("dropped {} pairs that were empty or longer than {}", train.dropped, config.max_len);
    }
    let mut inputs = vec![src, tgt];
    let valid = match valid {
        Some((vs, vt)) => {
            exists(&vs, "validation source")?;
            exists(&vt, "validation target")?;
            let v = load_parallel(&vs, &vt, &sv, &tv, config.max_len).map_err(runtime)?;
            inputs.extend([vs, vt]);
            Some(v)
        }
        None => None,
    };
    Ok((train, valid, inputs))
}

fn resolve_config(a: &TrainArgs) -> CliResult<TrainingConfig> {
    let mut c = TrainingConfig::default();
    if let Some(p) = &a.config {
        exists(p, "config file")?;
        let text = fs::read_to_string(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        c.apply_text(&text).map_err(|e| usage(e.to_string()))?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        c.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(l) = &a.loss {
        c.agreement_loss = LossKind::parse_optional(l).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(l) = a.lambda {
        c.lambda = l;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(e) = a.epochs {
        c.max_epochs = e;
    }
    if let Some(m) = a.max_len {
        c.max_len = m;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    if a.mode == ModeArg::Joint && c.agreement_loss.is_none() {
        return Err(usage("joint mode needs --loss soa, sos or mul"));
    }
    if a.mode == ModeArg::Independent && (a.loss.is_some() || a.lambda.is_some()) {
        return Err(usage("--loss and --lambda only apply to --mode joint"));
    }
    Ok(c)
}

fn checkpoint_file(path: &Path, direction: Direction) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{}.ckpt", direction.name()))
    } else {
        path.to_path_buf()
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(runtime)
}

fn history_with_run(run: &str, h: &TrainingHistory, header: bool) -> String {
    let mut s = String::new();
    for (i, line) in h.to_tsv().lines().enumerate() {
        if i == 0 {
            if header {
                let _ = writeln!(s, "run\t{line}");
            }
        } else {
            let _ = writeln!(s, "{run}\t{line}");
        }
    }
    s
}

fn cmd_train(a: TrainArgs, raw: &[String]) -> CliResult<()> {
    let config = resolve_config(&a)?;
    let (train, valid, inputs) = load_training_data(&a, &config, config.seed)?;
    mkdir(&a.out)?;
    let mut run = Run::new("train", raw);
    run.manifest.seed = Some(config.seed);
    run.manifest.config = Some(config.to_text());
    run.manifest.inputs = inputs;

    let modes = match a.mode {
        ModeArg::Independent => vec![Mode::Independent(Direction::Forward), Mode::Independent(Direction::Backward)],
        ModeArg::Joint => vec![Mode::Joint],
    };
    let init = match &a.init_from {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(usage(format!("--init-from {} is not a directory", dir.display())));
            }
            let (fp, bp) = (dir.join("forward.ckpt"), dir.join("backward.ckpt"));
            let f = load_checkpoint(&fp)?;
            let b = load_checkpoint(&bp)?;
            run.manifest.inputs.extend([fp, bp]);
            let dims = trainer::corpus_dims(&train, &config);
            if f.dims() != dims || b.dims() != dims.reversed() {
                return Err(usage(format!(
                    "--init-from models have dimensions {:?}, the config asks for {dims:?}",
                    f.dims()
                )));
            }
            if f.source_vocab != train.source_vocab || f.target_vocab != train.target_vocab {
                return Err(usage("--init-from models use a different vocabulary than the training data"));
            }
            Some((f.params, b.params))
        }
        None => None,
    };
    let mut history = String::new();
    for (i, mode) in modes.into_iter().enumerate() {
        let state = match &init {
            Some((f, b)) => Some(
                TrainState::from_params(
                    mode,
                    match mode {
                        Mode::Joint => vec![f.clone(), b.clone()],
                        Mode::Independent(Direction::Forward) => vec![f.clone()],
                        Mode::Independent(Direction::Backward) => vec![b.clone()],
                    },
                )
                .map_err(|e| runtime(e.to_string()))?,
            ),
            None => None,
        };
        let out = trainer::train(mode, &train, valid.as_ref(), &config, state).map_err(runtime)?;
        for ck in out.state.to_checkpoints(&config, &train.source_vocab, &train.target_vocab) {
            let path = a.out.join(format!("{}.ckpt", ck.direction.name()));
            ck.save(&path).map_err(runtime)?;
            run.manifest.outputs.push(path);
        }
        let label = match mode {
            Mode::Joint => "joint",
            Mode::Independent(d) => d.name(),
        };
        history.push_str(&history_with_run(label, out.history(), i == 0));
    }
    let hpath = a.out.join("history.tsv");
    write_file(&hpath, &history)?;
    run.manifest.outputs.push(hpath);
    run.finish(&a.out.join("manifest.txt"))
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn cmd_translate(a: TranslateArgs, raw: &[String]) -> CliResult<()> {
    if a.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    if a.lexicon.is_some() && !a.replace_unk {
        return Err(usage("--lexicon needs --replace-unk"));
    }
    let ck_path = checkpoint_file(&a.checkpoint, Direction::Forward);
    let ck = load_checkpoint(&ck_path)?;
    exists(&a.src, "source file")?;
    let lexicon = match &a.lexicon {
        Some(p) => {
            exists(p, "lexicon")?;
            Some(Lexicon::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let lines = read_lines(&a.src).map_err(runtime)?;
    let results: Vec<CliResult<(String, String)>> = lines
        .par_iter()
        .map(|line| {
            let toks = tokens(line);
            let ids = ck.source_vocab.encode(&toks);
            let max_len = a.max_len.unwrap_or(2 * ids.len() + 2);
            let hyp = decode::beam_decode(&ids, &ck.params, a.beam, max_len).map_err(runtime)?;
            let words = if a.replace_unk {
                decode::replace_unknowns(&hyp, &toks, |id| ck.target_vocab.token(id).to_string(), lexicon.as_ref())
            } else {
                ck.target_vocab.decode(hyp.words())
            };
            let links: Vec<Link> = hyp
                .alignment_matrix()
                .map(|m| extract_one_to_one(&m).into_iter().map(|(s, t)| Link::sure(s, t)).collect())
                .unwrap_or_default();
            Ok((words.join(" "), format_pharaoh(&links)))
        })
        .collect();
    let mut out = String::new();
    let mut align = String::new();
    for r in results {
        let (t, l) = r?;
        out.push_str(&t);
        out.push('\n');
        align.push_str(&l);
        align.push('\n');
    }
    let mut run = Run::new("translate", raw);
    run.manifest.inputs = vec![ck_path, a.src.clone()];
    run.manifest.inputs.extend(a.lexicon.clone());
    write_file(&a.out, &out)?;
    run.manifest.outputs.push(a.out.clone());
    if let Some(p) = &a.emit_align {
        write_file(p, &align)?;
        run.manifest.outputs.push(p.clone());
    }
    run.finish(&manifest_path_for(&a.out))
}

fn cmd_align(a: AlignArgs, raw: &[String]) -> CliResult<()> {
    let ck_path = checkpoint_file(&a.checkpoint, Direction::Forward);
    let ck = load_checkpoint(&ck_path)?;
    exists(&a.src, "source file")?;
    exists(&a.tgt, "target file")?;
    let src = read_lines(&a.src).map_err(runtime)?;
    let tgt = read_lines(&a.tgt).map_err(runtime)?;
    if src.len() != tgt.len() {
        return Err(usage(format!("{} source lines but {} target lines", src.len(), tgt.len())));
    }
    let results: Vec<CliResult<Option<AlignmentMatrix>>> = src
        .par_iter()
        .zip(&tgt)
        .map(|(s, t)| {
            let pair = SentencePair::new(ck.source_vocab.encode(&tokens(s)), ck.target_vocab.encode(&tokens(t)));
            if pair.source.is_empty() || pair.target.is_empty() {
                return Ok(None);
            }
            force_decode(&pair, &ck.params).map(Some).map_err(runtime)
        })
        .collect();
    let mut links_out = String::new();
    let mut soft = String::from("pair\ttarget_pos\tweights\n");
    for (i, r) in results.into_iter().enumerate() {
        if let Some(m) = r? {
            let links: Vec<Link> = extract_one_to_one(&m).into_iter().map(|(s, t)| Link::sure(s, t)).collect();
            links_out.push_str(&format_pharaoh(&links));
            for n in 0..m.rows() {
                let w: Vec<String> = m.row(n).iter().map(|x| x.to_string()).collect();
                let _ = writeln!(soft, "{i}\t{n}\t{}", w.join("\t"));
            }
        }
        links_out.push('\n');
    }
    let mut run = Run::new("align", raw);
    run.manifest.inputs = vec![ck_path, a.src.clone(), a.tgt.clone()];
    write_file(&a.out, &links_out)?;
    run.manifest.outputs.push(a.out.clone());
    if let Some(p) = &a.soft_out {
        write_file(p, &soft)?;
        run.manifest.outputs.push(p.clone());
    }
    run.finish(&manifest_path_for(&a.out))
}

fn read_pharaoh_file(path: &Path) -> CliResult<Vec<Vec<Link>>> {
    let lines = read_lines(path).map_err(runtime)?;
    lines.iter().enumerate().map(|(i, l)| parse_pharaoh(l, i + 1).map_err(runtime)).collect()
}

fn cmd_eval(a: EvalArgs, raw: &[String]) -> CliResult<()> {
    let mut out = String::from("metric\tdirection\tvalue\n");
    let mut run = Run::new("eval", raw);
    if a.aer {
        let align = a.align.as_ref().ok_or_else(|| usage("--aer needs --align"))?;
        let gold = a.gold.as_ref().ok_or_else(|| usage("--aer needs --gold"))?;
        exists(align, "alignment file")?;
        exists(gold, "gold alignment file")?;
        let pred = read_pharaoh_file(align)?;
        let gold_links = read_pharaoh_file(gold)?;
        if pred.len() != gold_links.len() {
            return Err(usage(format!("{} alignment lines but {} gold lines", pred.len(), gold_links.len())));
        }
        let sets: Vec<(LinkSet, LinkSet, LinkSet)> = pred
            .iter()
            .zip(&gold_links)
            .map(|(p, g)| {
                let a: LinkSet = p.iter().map(|l| (l.source, l.target)).collect();
                let s: LinkSet = g.iter().filter(|l| l.kind == LinkKind::Sure).map(|l| (l.source, l.target)).collect();
                let q: LinkSet = g.iter().map(|l| (l.source, l.target)).collect();
                (a, s, q)
            })
            .collect();
        let v = metrics::corpus_aer(sets.iter().map(|(a, s, p)| (a, s, p)));
        let _ = writeln!(out, "aer\t{}\t{v}", a.direction);
        run.manifest.inputs = vec![align.clone(), gold.clone()];
    } else {
        let hyp = a.hyp.as_ref().ok_or_else(|| usage("BLEU needs --hyp and --ref (or use --aer)"))?;
        let reference = a.reference.as_ref().ok_or_else(|| usage("BLEU needs --hyp and --ref"))?;
        exists(hyp, "hypothesis file")?;
        exists(reference, "reference file")?;
        let cands: Vec<Vec<String>> = read_lines(hyp).map_err(runtime)?.iter().map(|l| tokens(l)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            read_lines(reference).map_err(runtime)?.iter().map(|l| vec![tokens(l)]).collect();
        let bleu = metrics::bleu(&cands, &refs).map_err(|e| usage(e.to_string()))?;
        let _ = writeln!(out, "bleu\t{}\t{bleu}", a.direction);
        run.manifest.inputs = vec![hyp.clone(), reference.clone()];
        if let Some(other) = &a.compare {
            exists(other, "comparison file")?;
            let b: Vec<Vec<String>> = read_lines(other).map_err(runtime)?.iter().map(|l| tokens(l)).collect();
            let bleu_b = metrics::bleu(&b, &refs).map_err(|e| usage(e.to_string()))?;
            let p = metrics::paired_bootstrap(&cands, &b, &refs, a.resamples, a.seed).map_err(|e| usage(e.to_string()))?;
            let _ = writeln!(out, "bleu_compare\t{}\t{bleu_b}", a.direction);
            let _ = writeln!(out, "bootstrap_p\t{}\t{p}", a.direction);
            run.manifest.inputs.push(other.clone());
            run.manifest.seed = Some(a.seed);
        }
    }
    match &a.out {
        Some(p) => {
            write_file(p, &out)?;
            run.manifest.outputs.push(p.clone());
            run.finish(&manifest_path_for(p))
        }
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn aligned_targets(ck: &Checkpoint, src: &[String], tgt: &[String]) -> CliResult<Vec<AlignedTarget>> {
    let results: Vec<CliResult<Option<AlignedTarget>>> = src
        .par_iter()
        .zip(tgt)
        .map(|(s, t)| {
            let pair = SentencePair::new(ck.source_vocab.encode(&tokens(s)), ck.target_vocab.encode(&tokens(t)));
            if pair.source.is_empty() || pair.target.is_empty() {
                return Ok(None);
            }
            let alignment = force_decode(&pair, &ck.params).map_err(runtime)?;
            Ok(Some(AlignedTarget { alignment, target: pair.target }))
        })
        .collect();
    results.into_iter().filter_map(Result::transpose).collect()
}

fn cmd_analyze(a: AnalyzeArgs, raw: &[String]) -> CliResult<()> {
    let ip = checkpoint_file(&a.indep, Direction::Forward);
    let jp = checkpoint_file(&a.joint, Direction::Forward);
    let indep = load_checkpoint(&ip)?;
    let joint = load_checkpoint(&jp)?;
    if indep.source_vocab != joint.source_vocab || indep.target_vocab != joint.target_vocab {
        return Err(runtime("the two checkpoints use different vocabularies"));
    }
    exists(&a.src, "source file")?;
    exists(&a.tgt, "target file")?;
    let src = read_lines(&a.src).map_err(runtime)?;
    let tgt = read_lines(&a.tgt).map_err(runtime)?;
    if src.len() != tgt.len() {
        return Err(usage(format!("{} source lines but {} target lines", src.len(), tgt.len())));
    }
    let ai = aligned_targets(&indep, &src, &tgt)?;
    let aj = aligned_targets(&joint, &src, &tgt)?;
    let rows = metrics::entropy_table(&ai, &aj, |y| indep.target_vocab.token(y).to_string());
    let mut out = String::from("token\tfrequency_band\tfrequency\tentropy_independent\tentropy_joint\n");
    for r in &rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.token, r.band.name(), r.frequency, r.independent, r.joint);
    }
    log::info!(
        "mean attention entropy: independent {:.4}, joint {:.4}",
        metrics::mean_attention_entropy(&ai),
        metrics::mean_attention_entropy(&aj)
    );
    let mut run = Run::new("analyze", raw);
    run.manifest.inputs = vec![ip, jp, a.src.clone(), a.tgt.clone()];
    write_file(&a.out, &out)?;
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path_for(&a.out))
}

fn cmd_replay(a: ReplayArgs) -> CliResult<()> {
    exists(&a.manifest, "manifest")?;
    let text = fs::read_to_string(&a.manifest).map_err(|e| runtime(format!("{}: {e}", a.manifest.display())))?;
    let m = RunManifest::from_text(&text).map_err(usage)?;
    if m.command == "replay" {
        return Err(usage("cannot replay a replay"));
    }
    let mut args = m.args.clone();
    if let Some(out) = &a.out {
        let i = args
            .iter()
            .position(|x| x == "--out")
            .ok_or_else(|| usage("the recorded command has no --out to replace"))?;
        if i + 1 >= args.len() {
            return Err(usage("the recorded --out has no value"));
        }
        args[i + 1] = out.to_string_lossy().into_owned();
    }
    let mut argv = vec![OsString::from("biattn")];
    argv.extend(args.iter().map(OsString::from));
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(e.to_string()))?;
    run(cli.command, &args)
}
