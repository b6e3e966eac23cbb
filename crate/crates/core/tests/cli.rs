//! The `biattn` binary: outputs, exit codes and replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use biattn::corpus::{load_parallel_with_gold, LinkKind, Vocabulary};
use biattn::decode::{extract_one_to_one, force_decode, greedy_decode, LinkSet};
use biattn::metrics::corpus_aer;
use biattn::trainer::Checkpoint;
use tempfile::TempDir;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn biattn(args: &[&str]) -> Output {
    biattn_env(args, &[])
}

fn biattn_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_biattn"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--set", "embed_dim=8", "--set", "hidden_dim=16", "--set", "batch_size=16", "--epochs", "2"];

/// Synthetic data plus an independent and a joint run, shared by the tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn indep(&self) -> PathBuf {
        self.root.join("indep")
    }
    fn joint(&self) -> PathBuf {
        self.root.join("joint")
    }
    fn scratch(&self, name: &str) -> PathBuf {
        let p = self.root.join("scratch").join(name);
        fs::create_dir_all(&p).unwrap();
        p
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let o = biattn(&["synth", "--task", "swap", "--pairs", "120", "--heldout", "20", "--seed", "2", "--out", s(&data)]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        for (mode, out) in [("independent", "indep"), ("joint", "joint")] {
            let mut args = vec!["train", "--mode", mode, "--data", s(&data), "--out"];
            let out = root.join(out);
            args.push(s(&out));
            args.extend(SMALL);
            let o = biattn(&args);
            assert_eq!(o.code, 0, "{}", o.stderr);
        }
        Fixture { _dir: dir, root }
    })
}

#[test]
fn help_and_parse_errors() {
    assert_eq!(biattn(&["--help"]).code, 0);
    assert_eq!(biattn(&["--version"]).code, 0);
    assert_eq!(biattn(&[]).code, 2);
    assert_eq!(biattn(&["frobnicate"]).code, 2);
    assert_eq!(biattn(&["train", "--mode", "sideways", "--out", "x"]).code, 2);
    assert_eq!(biattn(&["translate", "--bogus"]).code, 2);
}

#[test]
fn synth_writes_corpora_and_rejects_bad_arguments() {
    let f = fixture();
    for name in ["train.src", "train.tgt", "train.gold", "valid.src", "valid.tgt", "valid.gold", "manifest.txt"] {
        assert!(f.data().join(name).is_file(), "{name}");
    }
    let out = f.scratch("synth");
    assert_eq!(biattn(&["synth", "--task", "nonsense", "--out", s(&out)]).code, 2);
    assert_eq!(biattn(&["synth", "--task", "copy", "--len", "5:2", "--out", s(&out)]).code, 2);
    assert_eq!(biattn(&["synth", "--task", "copy", "--len", "x", "--out", s(&out)]).code, 2);
    assert_eq!(biattn(&["synth", "--task", "swap", "--vocab-size", "3", "--out", s(&out)]).code, 2);
}

#[test]
fn train_outputs_checkpoints_history_and_manifest() {
    let f = fixture();
    for dir in [f.indep(), f.joint()] {
        for name in ["forward.ckpt", "backward.ckpt", "history.tsv", "manifest.txt"] {
            assert!(dir.join(name).is_file(), "{}/{name}", dir.display());
        }
    }
    let h = fs::read_to_string(f.indep().join("history.tsv")).unwrap();
    let lines: Vec<&str> = h.lines().collect();
    assert!(lines[0].starts_with("run\tepoch"));
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("forward\t1\t") && lines[3].starts_with("backward\t1\t"));
    let m = fs::read_to_string(f.joint().join("manifest.txt")).unwrap();
    for key in ["command = train", "seed = ", "wall_clock_secs = ", "config.lambda = 1", "input = ", "output = "] {
        assert!(m.contains(key), "{key}");
    }
}

#[test]
fn train_usage_errors() {
    let f = fixture();
    let out = f.scratch("train_err");
    let data = f.data();
    let run = |extra: &[&str]| {
        let mut args = vec!["train", "--out", s(&out)];
        args.extend(extra);
        args.extend(SMALL);
        biattn(&args).code
    };
    assert_eq!(run(&["--mode", "joint", "--src", "/nonexistent.src", "--tgt", "/nonexistent.tgt"]), 2);
    assert_eq!(run(&["--mode", "joint", "--data", "/nonexistent-dir"]), 2);
    assert_eq!(run(&["--mode", "joint"]), 2);
    assert_eq!(run(&["--mode", "joint", "--loss", "none", "--data", s(&data)]), 2);
    assert_eq!(run(&["--mode", "joint", "--loss", "kl", "--data", s(&data)]), 2);
    assert_eq!(run(&["--mode", "independent", "--loss", "mul", "--data", s(&data)]), 2);
    assert_eq!(run(&["--mode", "joint", "--lambda", "-1", "--data", s(&data)]), 2);
    assert_eq!(run(&["--mode", "joint", "--data", s(&data), "--set", "no_such_key=1"]), 2);
    assert_eq!(run(&["--mode", "joint", "--data", s(&data), "--config", "/nonexistent.cfg"]), 2);
    assert_eq!(run(&["--mode", "joint", "--data", s(&data), "--init-from", "/nonexistent-dir"]), 2);
    let short = out.join("short.tgt");
    fs::write(&short, "t1\n").unwrap();
    let src = data.join("train.src");
    assert_eq!(run(&["--mode", "joint", "--src", s(&src), "--tgt", s(&short)]), 2);
    let only = data.join("valid.src");
    assert_eq!(run(&["--mode", "joint", "--src", s(&src), "--tgt", s(&src), "--valid-src", s(&only)]), 2);
}

#[test]
fn train_config_file_and_failures() {
    let f = fixture();
    let out = f.scratch("train_cfg");
    let cfg = out.join("run.cfg");
    fs::write(&cfg, "# tiny\nembed_dim = 4\nhidden_dim = 4\nmax_epochs = 1\n").unwrap();
    let o = biattn(&["train", "--mode", "joint", "--lambda", "0", "--data", s(&f.data()), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stderr.contains("inert"), "{}", o.stderr);
    let ck = Checkpoint::load(&out.join("forward.ckpt")).unwrap();
    assert_eq!((ck.dims().embed, ck.dims().hidden, ck.config.lambda), (4, 4, 0.0));

    fs::write(&cfg, "hidden_dim = many\n").unwrap();
    assert_eq!(biattn(&["train", "--mode", "joint", "--data", s(&f.data()), "--config", s(&cfg), "--out", s(&out)]).code, 2);

    // a learning rate this large drives the attention mass to zero and the run aborts
    let o = biattn(&[
        "train", "--mode", "joint", "--data", s(&f.data()), "--out", s(&out), "--set", "learning_rate=1000", "--epochs", "3",
        "--set", "embed_dim=8", "--set", "hidden_dim=8",
    ]);
    assert_eq!(o.code, 1, "{}", o.stderr);

    // warm start from the independent models
    let o = biattn(&[
        "train", "--mode", "joint", "--data", s(&f.data()), "--out", s(&out), "--init-from", s(&f.indep()), "--epochs", "1",
        "--set", "embed_dim=8", "--set", "hidden_dim=16",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let o = biattn(&[
        "train", "--mode", "joint", "--data", s(&f.data()), "--out", s(&out), "--init-from", s(&f.indep()), "--epochs", "1",
    ]);
    assert_eq!(o.code, 2, "dimension mismatch with --init-from: {}", o.stderr);
}

#[test]
fn translate_with_beam_one_is_greedy() {
    let f = fixture();
    let out = f.scratch("translate");
    let hyp = out.join("hyp.txt");
    let al = out.join("hyp.align");
    let src = f.data().join("valid.src");
    let o = biattn(&["translate", "--checkpoint", s(&f.joint()), "--src", s(&src), "--out", s(&hyp), "--beam", "1", "--emit-align", s(&al)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let ck = Checkpoint::load(&f.joint().join("forward.ckpt")).unwrap();
    let lines = fs::read_to_string(&src).unwrap();
    let produced = fs::read_to_string(&hyp).unwrap();
    assert_eq!(produced.lines().count(), lines.lines().count());
    assert_eq!(fs::read_to_string(&al).unwrap().lines().count(), lines.lines().count());
    for (line, got) in lines.lines().zip(produced.lines()) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let ids = ck.source_vocab.encode(&toks);
        let h = greedy_decode(&ids, &ck.params, 2 * ids.len() + 2).unwrap();
        assert_eq!(got, ck.target_vocab.decode(h.words()).join(" "));
    }
    assert!(out.join("hyp.txt.manifest").is_file());
}

#[test]
fn translate_replaces_unknowns_from_lexicon() {
    let f = fixture();
    let out = f.scratch("translate_unk");
    let src = out.join("in.txt");
    fs::write(&src, "zzunseen s4 s5\nqqother\n").unwrap();
    let lex = out.join("lex.tsv");
    fs::write(&lex, "zzunseen\tLEXWORD\n").unwrap();
    let hyp = out.join("hyp.txt");
    let o = biattn(&[
        "translate", "--checkpoint", s(&f.joint()), "--src", s(&src), "--out", s(&hyp), "--replace-unk", "--lexicon", s(&lex),
        "--max-len", "8",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let text = fs::read_to_string(&hyp).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains("<unk>"), "{text}");
}

#[test]
fn translate_errors() {
    let f = fixture();
    let out = f.scratch("translate_err");
    let src = f.data().join("valid.src");
    let hyp = out.join("hyp.txt");
    let bad = out.join("bad.ckpt");
    fs::write(&bad, b"BIATTNCK garbage").unwrap();
    let run = |args: &[&str]| {
        let mut a = vec!["translate", "--out", s(&hyp)];
        a.extend(args);
        biattn(&a).code
    };
    assert_eq!(run(&["--checkpoint", s(&bad), "--src", s(&src)]), 1);
    let truncated = out.join("trunc.ckpt");
    let bytes = fs::read(f.joint().join("forward.ckpt")).unwrap();
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(run(&["--checkpoint", s(&truncated), "--src", s(&src)]), 1);
    assert_eq!(run(&["--checkpoint", "/nonexistent.ckpt", "--src", s(&src)]), 2);
    assert_eq!(run(&["--checkpoint", s(&f.joint()), "--src", "/nonexistent.src"]), 2);
    assert_eq!(run(&["--checkpoint", s(&f.joint()), "--src", s(&src), "--beam", "0"]), 2);
    assert_eq!(run(&["--checkpoint", s(&f.joint()), "--src", s(&src), "--lexicon", s(&src)]), 2);
    assert_eq!(run(&["--checkpoint", s(&f.joint()), "--src", s(&src), "--replace-unk", "--lexicon", "/nonexistent"]), 2);
}

fn gold_sets(data: &Path, vocab_src: &Vocabulary, vocab_tgt: &Vocabulary) -> Vec<(LinkSet, LinkSet)> {
    let c = load_parallel_with_gold(
        &data.join("valid.src"),
        &data.join("valid.tgt"),
        Some(&data.join("valid.gold")),
        vocab_src,
        vocab_tgt,
        usize::MAX,
    )
    .unwrap();
    c.pairs
        .iter()
        .map(|p| {
            let g = p.gold.as_ref().unwrap();
            let sure = g.iter().filter(|l| l.kind == LinkKind::Sure).map(|l| (l.source, l.target)).collect();
            let possible = g.iter().map(|l| (l.source, l.target)).collect();
            (sure, possible)
        })
        .collect()
}

#[test]
fn align_output_feeds_eval_aer_exactly() {
    let f = fixture();
    let out = f.scratch("align");
    let (src, tgt) = (f.data().join("valid.src"), f.data().join("valid.tgt"));
    let links = out.join("links.txt");
    let soft = out.join("soft.tsv");
    let o = biattn(&["align", "--checkpoint", s(&f.joint()), "--src", s(&src), "--tgt", s(&tgt), "--out", s(&links), "--soft-out", s(&soft)]);
    assert_eq!(o.code, 0, "{}", o.stderr);

    let tgt_lines = fs::read_to_string(&tgt).unwrap();
    let link_lines = fs::read_to_string(&links).unwrap();
    assert_eq!(link_lines.lines().count(), tgt_lines.lines().count());
    for (l, t) in link_lines.lines().zip(tgt_lines.lines()) {
        assert!(l.split_whitespace().count() <= t.split_whitespace().count());
    }
    let soft_text = fs::read_to_string(&soft).unwrap();
    let mut rows = 0;
    for line in soft_text.lines().skip(1) {
        let sum: f64 = line.split('\t').skip(2).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        rows += 1;
    }
    assert!(rows > 0);

    // in-process AER over the same pairs
    let ck = Checkpoint::load(&f.joint().join("forward.ckpt")).unwrap();
    let c = load_parallel_with_gold(&src, &tgt, Some(&f.data().join("valid.gold")), &ck.source_vocab, &ck.target_vocab, usize::MAX)
        .unwrap();
    let predicted: Vec<LinkSet> = c.pairs.iter().map(|p| extract_one_to_one(&force_decode(p, &ck.params).unwrap())).collect();
    let gold = gold_sets(&f.data(), &ck.source_vocab, &ck.target_vocab);
    let expect = corpus_aer(predicted.iter().zip(&gold).map(|(a, (s, p))| (a, s, p)));

    let o = biattn(&["eval", "--aer", "--align", s(&links), "--gold", s(&f.data().join("valid.gold"))]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let row = o.stdout.lines().nth(1).unwrap();
    let value: f64 = row.split('\t').nth(2).unwrap().parse().unwrap();
    assert_eq!(value.to_bits(), expect.to_bits(), "{row}");
}

#[test]
fn align_errors() {
    let f = fixture();
    let out = f.scratch("align_err");
    let links = out.join("links.txt");
    let src = f.data().join("valid.src");
    let tgt = f.data().join("train.tgt");
    assert_eq!(biattn(&["align", "--checkpoint", s(&f.joint()), "--src", s(&src), "--tgt", s(&tgt), "--out", s(&links)]).code, 2);
    assert_eq!(biattn(&["align", "--checkpoint", "/nonexistent", "--src", s(&src), "--tgt", s(&src), "--out", s(&links)]).code, 2);
    assert_eq!(biattn(&["align", "--checkpoint", s(&f.joint()), "--src", s(&src), "--out", s(&links)]).code, 2);
}

#[test]
fn eval_bleu_and_bootstrap() {
    let f = fixture();
    let out = f.scratch("eval");
    let reference = f.data().join("valid.tgt");
    let o = biattn(&["eval", "--hyp", s(&reference), "--ref", s(&reference)]);
    assert_eq!(o.code, 0);
    assert_eq!(o.stdout.lines().next(), Some("metric\tdirection\tvalue"));
    assert_eq!(o.stdout.lines().nth(1), Some("bleu\tforward\t100"));

    let tsv = out.join("eval.tsv");
    let o = biattn(&["eval", "--hyp", s(&reference), "--ref", s(&reference), "--compare", s(&reference), "--resamples", "20", "--out", s(&tsv)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let text = fs::read_to_string(&tsv).unwrap();
    assert!(text.contains("bootstrap_p\tforward\t1\n"), "{text}");
    assert!(out.join("eval.tsv.manifest").is_file());
}

#[test]
fn eval_errors() {
    let f = fixture();
    let reference = f.data().join("valid.tgt");
    let train = f.data().join("train.tgt");
    let gold = f.data().join("valid.gold");
    assert_eq!(biattn(&["eval", "--aer", "--align", s(&gold), "--gold", "/nonexistent.gold"]).code, 2);
    assert_eq!(biattn(&["eval", "--aer", "--align", s(&gold)]).code, 2);
    assert_eq!(biattn(&["eval", "--aer", "--align", s(&gold), "--gold", s(&f.data().join("train.gold"))]).code, 2);
    assert_eq!(biattn(&["eval", "--hyp", s(&reference)]).code, 2);
    assert_eq!(biattn(&["eval", "--hyp", s(&train), "--ref", s(&reference)]).code, 2);
    assert_eq!(biattn(&["eval", "--hyp", s(&reference), "--ref", "/nonexistent"]).code, 2);
    let bad = f.scratch("eval_err").join("bad.align");
    fs::write(&bad, "0-x\n").unwrap();
    assert_eq!(biattn(&["eval", "--aer", "--align", s(&bad), "--gold", s(&bad)]).code, 1);
}

#[test]
fn analyze_writes_entropy_table() {
    let f = fixture();
    let out = f.scratch("analyze").join("entropy.tsv");
    let (src, tgt) = (f.data().join("valid.src"), f.data().join("valid.tgt"));
    let o = biattn(&["analyze", "--indep", s(&f.indep()), "--joint", s(&f.joint()), "--src", s(&src), "--tgt", s(&tgt), "--out", s(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("token\tfrequency_band\tfrequency\tentropy_independent\tentropy_joint"));
    let bands: Vec<String> = lines.map(|l| l.split('\t').nth(1).unwrap().to_string()).collect();
    assert!(!bands.is_empty());
    assert_eq!(bands.first().map(String::as_str), Some("high"));

    // a checkpoint over another vocabulary cannot be compared
    let other = f.scratch("analyze_other");
    let data = other.join("data");
    assert_eq!(biattn(&["synth", "--task", "copy", "--vocab-size", "9", "--pairs", "10", "--heldout", "0", "--out", s(&data)]).code, 0);
    let mut args = vec!["train", "--mode", "independent", "--data", s(&data), "--out", s(&other)];
    args.extend(SMALL);
    assert_eq!(biattn(&args).code, 0);
    let o = biattn(&["analyze", "--indep", s(&other), "--joint", s(&f.joint()), "--src", s(&src), "--tgt", s(&tgt), "--out", s(&out)]);
    assert_eq!(o.code, 1);
    assert_eq!(biattn(&["analyze", "--indep", s(&f.indep()), "--joint", s(&f.joint()), "--src", s(&src), "--tgt", s(&f.data().join("train.tgt")), "--out", s(&out)]).code, 2);
}

fn same_bytes(a: &Path, b: &Path) {
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{} vs {}", a.display(), b.display());
}

#[test]
fn replay_reproduces_training_bytes() {
    let f = fixture();
    let again = f.scratch("replay_train");
    let o = biattn(&["replay", "--manifest", s(&f.joint().join("manifest.txt")), "--out", s(&again)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    for name in ["forward.ckpt", "backward.ckpt", "history.tsv"] {
        same_bytes(&f.joint().join(name), &again.join(name));
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let f = fixture();
    let a = f.scratch("threads_a");
    let b = f.scratch("threads_b");
    let data = f.data();
    for (dir, n) in [(&a, "1"), (&b, "3")] {
        let mut args = vec!["train", "--mode", "joint", "--data", s(&data), "--out", s(dir)];
        args.extend(SMALL);
        let o = biattn_env(&args, &[("BIATTN_THREADS", n)]);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }
    for name in ["forward.ckpt", "backward.ckpt", "history.tsv"] {
        same_bytes(&a.join(name), &b.join(name));
    }
}

#[test]
fn replay_errors() {
    let f = fixture();
    let dir = f.scratch("replay_err");
    assert_eq!(biattn(&["replay", "--manifest", "/nonexistent"]).code, 2);
    let bad = dir.join("bad.manifest");
    fs::write(&bad, "nonsense line\n").unwrap();
    assert_eq!(biattn(&["replay", "--manifest", s(&bad)]).code, 2);
    fs::write(&bad, "command = eval\narg = eval\narg = --hyp\narg = x\n").unwrap();
    assert_eq!(biattn(&["replay", "--manifest", s(&bad), "--out", "y"]).code, 2);
}
