//! `melbridge`: corpus generation, the staged pipeline, evaluation and
//! experiment recipes.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 frozen parameter
//! modified, 4 non-finite value, 5 I/O or file-format error. Set
//! `MELBRIDGE_VERBOSE=1` for progress messages on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use melbridge::config::ExperimentConfig;
use melbridge::evalmetrics::{paired_report, SpeakerStatistics, ARM_CSV_HEADER};
use melbridge::pipeline::{
    adapt_untranscribed, align_mel_encoder, evaluate_arm, synthesize, train_source, Checkpoint, Experiment,
    MetricsLog, Recipe, Stage, StagePlan,
};
use melbridge::synthdata::{AdaptationSet, Corpus, Split};
use melbridge::{Error, Result};

const CORPUS_FILE: &str = "corpus.bin";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "melbridge", version, about = "TTS voice adaptation from untranscribed speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and one mel-only set per adaptation speaker.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source model on the transcribed source speakers.
    TrainSource {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mel encoder against a frozen source model.
    AlignMelEncoder {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt to one speaker from untranscribed mels.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        speaker: u32,
        #[arg(long = "n-utts")]
        n_utts: usize,
        /// A mel-only set file, or a corpus directory holding
        /// `adapt/speaker_<id>.melset`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a mel spectrogram from whitespace-separated phoneme ids.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "text-file")]
        text_file: PathBuf,
        #[arg(long)]
        speaker: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on held-out utterances; arms are paired against the first.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        arms: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to one speaker (default: every adaptation speaker).
        #[arg(long)]
        speaker: Option<u32>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a paired recipe end to end.
    Experiment {
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        seed: u64,
        /// Defaults to the desk-scale configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `experiment-<recipe>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn verbose() -> bool {
    std::env::var_os("MELBRIDGE_VERBOSE").is_some_and(|v| !v.is_empty() && v != "0")
}

fn note(msg: impl AsRef<str>) {
    if verbose() {
        eprintln!("{}", msg.as_ref());
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Sibling file of `out` named `<stem>.<suffix>`.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn parent_dir(out: &Path) -> Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Writes a stage checkpoint with its effective configuration and metrics.
fn save_stage(out: &Path, ckpt: &Checkpoint, log: &MetricsLog) -> Result<()> {
    parent_dir(out)?;
    ckpt.save(out)?;
    write(&sidecar(out, "config.toml"), ckpt.config.to_toml())?;
    write(&sidecar(out, "metrics.csv"), log.to_csv())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir.join(CORPUS_FILE))
}

fn melset_name(speaker: u32) -> String {
    format!("speaker_{speaker}.melset")
}

fn gen_corpus(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = Corpus::generate(&cfg.data)?;
    create_dir(&out.join("adapt"))?;
    corpus.save(out.join(CORPUS_FILE))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;

    let mut manifest = String::from("[corpus]\n");
    let _ = writeln!(manifest, "file = \"{CORPUS_FILE}\"");
    let _ = writeln!(manifest, "utterances = {}", corpus.utterances.len());
    let _ = writeln!(manifest, "source_speakers = {:?}", (0..cfg.data.n_source_speakers).collect::<Vec<_>>());
    for spk in cfg.data.adaptation_speakers() {
        let set = corpus.strip_transcripts(spk, Split::Train)?;
        set.save(out.join("adapt").join(melset_name(spk)))?;
        let _ = writeln!(manifest, "\n[[adaptation]]");
        let _ = writeln!(manifest, "speaker = {spk}");
        let _ = writeln!(manifest, "file = \"adapt/{}\"", melset_name(spk));
        let _ = writeln!(manifest, "utterances = {}", set.len());
        let _ = writeln!(manifest, "heldout = {}", corpus.speaker(spk, Split::Heldout).len());
    }
    write(&out.join("manifest.toml"), manifest)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
    Ok(())
}

fn run_train_source(corpus: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus = load_corpus(corpus)?;
    if corpus.config != cfg.data {
        return Err(Error::Config("the corpus was generated from a different [data] section".into()));
    }
    note(format!("source training: {} steps", cfg.train.source_steps));
    let mut log = MetricsLog::default();
    let ckpt = train_source(&corpus, &cfg, &StagePlan::source(&cfg.train), &mut log)?;
    save_stage(out, &ckpt, &log)?;
    println!("source checkpoint written to {}", out.display());
    Ok(())
}

fn run_align(ckpt: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let source = Checkpoint::load(ckpt)?;
    let corpus = load_corpus(corpus)?;
    note(format!("aligning: {} steps", source.config.train.align_steps));
    let mut log = MetricsLog::default();
    let aligned = align_mel_encoder(&source, &corpus, &StagePlan::align(&source.config.train), &mut log)?;
    save_stage(out, &aligned, &log)?;
    println!("aligned checkpoint written to {}", out.display());
    Ok(())
}

fn run_adapt(ckpt: &Path, speaker: u32, n_utts: usize, data: &Path, out: &Path) -> Result<()> {
    let aligned = Checkpoint::load(ckpt)?;
    if aligned.stage != Stage::MelEncoderAligning && aligned.stage != Stage::SourceTraining {
        return Err(Error::Config(format!("cannot adapt a {} checkpoint", aligned.stage)));
    }
    let path = if data.is_dir() {
        let melset = data.join("adapt").join(melset_name(speaker));
        if !melset.exists() && data.join(CORPUS_FILE).exists() {
            return Err(Error::TranscriptPresent(format!(
                "{} holds a transcribed corpus but no mel-only set for speaker {speaker}",
                data.display()
            )));
        }
        melset
    } else {
        data.to_path_buf()
    };
    let set = AdaptationSet::load(&path)?;
    if set.speaker_id() != speaker {
        return Err(Error::Config(format!("{} holds speaker {}, not {speaker}", path.display(), set.speaker_id())));
    }
    let set = set.first(n_utts)?;
    let plan = StagePlan::adapt(&aligned.config.train, speaker);
    note(format!("adapting speaker {speaker} on {n_utts} utterances: {} steps", plan.steps));
    let mut log = MetricsLog::default();
    let adapted = adapt_untranscribed(&aligned, &set, &plan, &mut log)?;
    save_stage(out, &adapted, &log)?;
    println!("adapted checkpoint written to {} (fields read: {})", out.display(), set.consumed_fields().join(", "));
    Ok(())
}

fn run_synthesize(ckpt: &Path, text_file: &Path, speaker: u32, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let text = fs::read_to_string(text_file)?;
    let phonemes = text
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Config(format!("phoneme id {t:?} is not a non-negative integer"))))
        .collect::<Result<Vec<_>>>()?;
    let mel = synthesize(&ckpt, &phonemes, speaker)?;
    let mut s = String::new();
    for t in 0..mel.rows() {
        let row: Vec<String> = mel.row(t).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    parent_dir(out)?;
    write(out, s)?;
    println!("{} frames written to {}", mel.rows(), out.display());
    Ok(())
}

fn run_eval(arms: &[PathBuf], corpus: &Path, speaker: Option<u32>, report: &Path) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let stats = SpeakerStatistics::new(&corpus.spec()?)?;
    let speakers: Vec<u32> = match speaker {
        Some(s) => vec![s],
        None => corpus.config.adaptation_speakers().collect(),
    };
    let utts: Vec<_> = speakers.iter().flat_map(|&s| corpus.speaker(s, Split::Heldout)).collect();
    if utts.is_empty() {
        return Err(Error::Config("no held-out utterances to evaluate".into()));
    }
    let mut evaluations = Vec::new();
    for path in arms {
        let ckpt = Checkpoint::load(path)?;
        let name = path.file_stem().map_or_else(|| "arm".into(), |s| s.to_string_lossy().into_owned());
        evaluations.push(evaluate_arm(&ckpt.model, &name, ckpt.config.train.seed, &utts, &stats)?);
    }
    let mut csv = format!("{ARM_CSV_HEADER}\n");
    let mut summary = String::new();
    for e in &evaluations {
        csv += &e.mae.csv_rows();
        csv += &e.proximity.csv_rows();
        let _ = writeln!(summary, "{}: mel_mae {:.6}, speaker_proximity {:.6}", e.mae.arm, e.mae.mean(), e.proximity.mean());
    }
    for other in evaluations.iter().skip(1) {
        for (a, b) in [(&evaluations[0].mae, &other.mae), (&evaluations[0].proximity, &other.proximity)] {
            let p = paired_report(a, b)?;
            csv += &p.csv_rows();
            let _ = writeln!(summary, "{}", p.summary());
        }
    }
    parent_dir(report)?;
    write(report, csv)?;
    print!("{summary}");
    Ok(())
}

fn run_experiment(recipe: &str, seed: u64, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let recipe: Recipe = recipe.parse()?;
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.train.seed = seed;
    cfg.validate()?;
    let out = out.map_or_else(|| PathBuf::from(format!("experiment-{recipe}-seed{seed}")), Path::to_path_buf);
    create_dir(&out)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;

    note(format!("experiment {recipe}: generating corpus"));
    let corpus = Corpus::generate(&cfg.data)?;
    let mut experiment = Experiment::new(cfg, corpus)?;
    let report = experiment.run_recipe(recipe)?;
    write(&out.join("report.csv"), report.metrics_csv())?;
    write(&out.join("summary.txt"), report.summary())?;
    write(&out.join("metrics.csv"), experiment.log.to_csv())?;
    if recipe == Recipe::DataSweep {
        write(&out.join("sweep.csv"), report.sweep_csv())?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => gen_corpus(&config, &out),
        Command::TrainSource { corpus, config, out } => run_train_source(&corpus, &config, &out),
        Command::AlignMelEncoder { ckpt, corpus, out } => run_align(&ckpt, &corpus, &out),
        Command::Adapt { ckpt, speaker, n_utts, data, out } => run_adapt(&ckpt, speaker, n_utts, &data, &out),
        Command::Synthesize { ckpt, text_file, speaker, out } => run_synthesize(&ckpt, &text_file, speaker, &out),
        Command::Eval { arms, corpus, speaker, report } => run_eval(&arms, &corpus, speaker, &report),
        Command::Experiment { recipe, seed, config, out } => {
            run_experiment(&recipe, seed, config.as_deref(), out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
