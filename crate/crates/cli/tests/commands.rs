use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
hidden_dim = 8
n_heads = 2
ffn_filter = 8
conv_kernel = 3
n_encoder_blocks = 1
n_decoder_blocks = 1
n_mel_encoder_blocks = 1
mel_dim = 6
phoneme_vocab_size = 8
speaker_embedding_dim = 4
n_speakers = 4
max_duration = 6
acoustic_dim = 2
predictor_filter = 8

[data]
seed = 3
phoneme_vocab_size = 8
mel_dim = 6
n_source_speakers = 2
utterances_per_source_speaker = 5
n_adaptation_speakers = 1
utterances_per_adaptation_speaker = 10
min_phonemes = 3
max_phonemes = 6
max_base_duration = 3

[train]
source_steps = 4
align_steps = 3
adapt_steps = 2
batch_size = 2
adapt_batch_size = 2
warmup_steps = 2
adapt_utterances = 4
sweep_sizes = [1, 2, 5, 8]
"#;

fn melbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melbridge")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = melbridge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = melbridge(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// gen-corpus, train-source, align-mel-encoder.
    fn aligned(&self) -> PathBuf {
        let (cfg, corpus) = (self.path("tiny.cfg"), self.path("corpus"));
        let (source, aligned) = (self.path("ckpt/source.ckpt"), self.path("ckpt/aligned.ckpt"));
        ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
        ok(&["train-source", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&source)]);
        ok(&["align-mel-encoder", "--ckpt", s(&source), "--corpus", s(&corpus), "--out", s(&aligned)]);
        aligned
    }
}

#[test]
fn staged_commands_produce_self_describing_outputs() {
    let ws = Workspace::new();
    let aligned = ws.aligned();
    let corpus = ws.path("corpus");
    for f in ["corpus.bin", "config.toml", "manifest.toml", "adapt/speaker_2.melset"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(corpus.join("manifest.toml")).unwrap();
    assert!(manifest.contains("speaker = 2") && manifest.contains("utterances = 8"), "{manifest}");
    let echoed = fs::read_to_string(ws.path("ckpt/source.config.toml")).unwrap();
    assert!(echoed.contains("source_steps = 4") && echoed.contains("adam_beta2 = 0.98"), "{echoed}");
    let metrics = fs::read_to_string(ws.path("ckpt/aligned.metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,stage,loss_name,value\n"));
    assert!(metrics.contains(",align,alignment,"));

    let adapted = ws.path("ckpt/adapted.ckpt");
    let out = ok(&["adapt", "--ckpt", s(&aligned), "--speaker", "2", "--n-utts", "3", "--data", s(&corpus), "--out", s(&adapted)]);
    assert!(out.contains("fields read: mel, speaker_id"), "{out}");

    let text = ws.path("text.txt");
    fs::write(&text, "1 4 2\n7 0\n").unwrap();
    let mel = ws.path("out/mel.txt");
    ok(&["synthesize", "--ckpt", s(&adapted), "--text-file", s(&text), "--speaker", "2", "--out", s(&mel)]);
    let first = fs::read_to_string(&mel).unwrap();
    assert!(!first.is_empty() && first.lines().all(|l| l.split(' ').count() == 6));
    ok(&["synthesize", "--ckpt", s(&adapted), "--text-file", s(&text), "--speaker", "2", "--out", s(&mel)]);
    assert_eq!(fs::read_to_string(&mel).unwrap(), first);

    let report = ws.path("eval.csv");
    let summary = ok(&["eval", "--arms", s(&adapted), s(&aligned), "--corpus", s(&corpus), "--report", s(&report)]);
    assert!(summary.contains("adapted vs aligned on mel_mae"), "{summary}");
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("utterance_id,arm,metric,value\n"));
    assert!(csv.contains(",adapted-aligned,mel_mae_delta,"));
}

#[test]
fn adapt_refuses_transcribed_input() {
    let ws = Workspace::new();
    let aligned = ws.aligned();
    let out = ws.path("x.ckpt");
    let corpus_file = ws.path("corpus/corpus.bin");
    let (c, err) = code(&["adapt", "--ckpt", s(&aligned), "--speaker", "2", "--n-utts", "3", "--data", s(&corpus_file), "--out", s(&out)]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("transcript"), "{err}");

    fs::remove_dir_all(ws.path("corpus/adapt")).unwrap();
    let corpus_dir = ws.path("corpus");
    let (c, err) = code(&["adapt", "--ckpt", s(&aligned), "--speaker", "2", "--n-utts", "3", "--data", s(&corpus_dir), "--out", s(&out)]);
    assert_eq!(c, 2, "{err}");
    assert!(!out.exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let ws = Workspace::new();
    let bad = ws.path("bad.cfg");
    fs::write(&bad, "[model]\nhidden_dim = 7\n").unwrap();
    let corpus = ws.path("c");
    assert_eq!(code(&["gen-corpus", "--config", s(&bad), "--out", s(&corpus)]).0, 2);
    fs::write(&bad, "[model]\nnot_a_key = 1\n").unwrap();
    assert_eq!(code(&["gen-corpus", "--config", s(&bad), "--out", s(&corpus)]).0, 2);
    assert_eq!(code(&["experiment", "--recipe", "nonsense", "--seed", "1"]).0, 2);

    let missing = ws.path("missing.ckpt");
    assert_eq!(code(&["align-mel-encoder", "--ckpt", s(&missing), "--corpus", s(&corpus), "--out", s(&missing)]).0, 5);
    let garbage = ws.path("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let text = ws.path("t.txt");
    fs::write(&text, "1 2").unwrap();
    let (c, err) = code(&["synthesize", "--ckpt", s(&garbage), "--text-file", s(&text), "--speaker", "0", "--out", s(&text)]);
    assert_eq!(c, 5, "{err}");
}

#[test]
fn experiment_reports_are_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.path("tiny.cfg");
    let (a, b) = (ws.path("run_a"), ws.path("run_b"));
    for out in [&a, &b] {
        ok(&["experiment", "--recipe", "main", "--seed", "7", "--config", s(&cfg), "--out", s(out)]);
    }
    for f in ["report.csv", "summary.txt", "metrics.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(a.join("summary.txt")).unwrap();
    assert!(summary.contains("main vs zero_shot on mel_mae"), "{summary}");
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 7"));
}

#[test]
fn data_sweep_emits_one_row_per_size() {
    let ws = Workspace::new();
    let cfg = ws.path("tiny.cfg");
    let out = ws.path("sweep");
    ok(&["experiment", "--recipe", "data-sweep", "--seed", "3", "--config", s(&cfg), "--out", s(&out)]);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let ns: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["1", "2", "5", "8"]);
}
