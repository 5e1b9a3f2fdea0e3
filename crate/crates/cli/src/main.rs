use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use prosdd::config::RunConfig;
use prosdd::corpus::{gen_corpus, Manifest, Split, MANIFEST_FILE};
use prosdd::data::load_split;
use prosdd::eval::{metrics_report, read_score_file, score_trials, write_score_file};
use prosdd::model::{read_checkpoint, write_checkpoint};
use prosdd::speaker::SpeakerEncoder;
use prosdd::targets::extract_corpus_targets;
use prosdd::trainer::harness::{run_gradcheck, TOLERANCE};
use prosdd::trainer::{format_log, train_stage1, train_stage2, StageTwoMode, TrainOutcome};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "prosdd", version, about = "Prosody-aware spoofed speech detection on a synthetic corpus")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set optimizer.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (manifest and audio).
    GenCorpus {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances_per_speaker: Option<usize>,
        /// Output directory [default: paths.corpus_dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute one prosodic target cache per utterance.
    ExtractTargets {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory [default: paths.targets_dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train Stage I (masked prediction on real speech) or Stage II.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, default_value = "full", value_parser = ["full", "no_stage1", "no_mp"])]
        mode: String,
        /// Stage I checkpoint for `--mode full` [default: <runs_dir>/stage1/selected.psdm].
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Training seed (initialisation, batching, masking, dropout).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory [default: <runs_dir>/stage1 or <runs_dir>/stage2_<mode>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a split with a checkpoint, or report metrics of a score file.
    Eval {
        #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
        checkpoint: Option<PathBuf>,
        /// Existing score file to report on.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Split to score [default: eval.split].
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Directory for the score file and report [default: the checkpoint's directory].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of both training losses on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<prosdd::Error> for Failure {
    fn from(e: prosdd::Error) -> Self {
        let code = if matches!(e, prosdd::Error::Config(_)) { EXIT_USAGE } else { EXIT_DATA };
        Failure { code, err: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: EXIT_DATA, err }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, err: anyhow!("{msg}") }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("PROSDD_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(format!("PROSDD_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let mut overrides = cli.overrides.clone();
    // Subcommand flags are shorthands for config keys and win over `--set`.
    match &cli.command {
        Command::GenCorpus { seed, speakers, utterances_per_speaker, out } => {
            push(&mut overrides, "seed", seed);
            push(&mut overrides, "corpus.speakers", speakers);
            push(&mut overrides, "corpus.utterances_per_speaker", utterances_per_speaker);
            push_path(&mut overrides, "paths.corpus_dir", out);
        }
        Command::ExtractTargets { corpus, out } => {
            push_path(&mut overrides, "paths.corpus_dir", corpus);
            push_path(&mut overrides, "paths.targets_dir", out);
        }
        Command::Train { corpus, targets, seed, epochs, stage, .. } => {
            push_path(&mut overrides, "paths.corpus_dir", corpus);
            push_path(&mut overrides, "paths.targets_dir", targets);
            push(&mut overrides, "train_seed", seed);
            let key = if *stage == 1 { "training.stage1_epochs" } else { "optimizer.epochs" };
            push(&mut overrides, key, epochs);
        }
        Command::Eval { corpus, split, .. } => {
            push_path(&mut overrides, "paths.corpus_dir", corpus);
            if let Some(s) = split {
                let s: Split = s.parse().map_err(usage)?;
                overrides.push(format!("eval.split=\"{s}\""));
            }
        }
        Command::Gradcheck { .. } => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenCorpus { .. } => cmd_gen_corpus(&cfg),
        Command::ExtractTargets { .. } => cmd_extract_targets(&cfg),
        Command::Train { stage, mode, init, out, .. } => {
            let mode: StageTwoMode = mode.parse().map_err(usage)?;
            cmd_train(&cfg, stage, mode, init, out)
        }
        Command::Eval { checkpoint, scores, out, .. } => match (checkpoint, scores) {
            (_, Some(scores)) => cmd_report(&scores),
            (Some(ckpt), None) => cmd_eval(&cfg, &ckpt, out),
            (None, None) => Err(usage("eval needs --checkpoint or --scores")),
        },
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn push<T: std::fmt::Display>(overrides: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        overrides.push(format!("{key}={v}"));
    }
}

fn push_path(overrides: &mut Vec<String>, key: &str, v: &Option<PathBuf>) {
    if let Some(p) = v {
        // TOML literal string: no escapes, so Windows-style paths survive.
        overrides.push(format!("{key}='{}'", p.display()));
    }
}

fn read_manifest(corpus_dir: &Path) -> Result<Manifest, Failure> {
    Ok(Manifest::read(&corpus_dir.join(MANIFEST_FILE))?)
}

fn cmd_gen_corpus(cfg: &RunConfig) -> Result<(), Failure> {
    let dir = &cfg.paths.corpus_dir;
    let manifest = gen_corpus(&cfg.corpus, cfg.seed, dir)?;
    cfg.persist(dir)?;
    log::info!("wrote {} utterances to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn cmd_extract_targets(cfg: &RunConfig) -> Result<(), Failure> {
    let manifest = read_manifest(&cfg.paths.corpus_dir)?;
    let encoder = SpeakerEncoder::new(cfg.speaker.expansion_seed);
    let out = &cfg.paths.targets_dir;
    let n = extract_corpus_targets(&cfg.paths.corpus_dir, &manifest, out, &encoder, &cfg.pitch)?;
    cfg.persist(out)?;
    log::info!("wrote {n} target caches to {}", out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: u8, mode: StageTwoMode, init: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let corpus = &cfg.paths.corpus_dir;
    let manifest = read_manifest(corpus)?;
    let tc = cfg.trainer();
    let (outcome, dir) = if stage == 1 {
        let dir = out.unwrap_or_else(|| cfg.paths.runs_dir.join("stage1"));
        let examples = load_split(corpus, &manifest, Split::Stage1Real, Some(&cfg.paths.targets_dir))?;
        (train_stage1(&examples, &cfg.model, &tc, cfg.train_seed)?, dir)
    } else {
        let dir = out.unwrap_or_else(|| cfg.paths.runs_dir.join(format!("stage2_{mode}")));
        let init_params = match mode {
            StageTwoMode::Full => {
                let path = init.unwrap_or_else(|| cfg.paths.runs_dir.join("stage1").join("selected.psdm"));
                Some(read_checkpoint(&path)?)
            }
            _ => {
                if let Some(p) = &init {
                    log::warn!("mode {mode} starts from a fresh initialisation; ignoring --init {}", p.display());
                }
                None
            }
        };
        let targets = (mode != StageTwoMode::NoMp).then_some(cfg.paths.targets_dir.as_path());
        let train = load_split(corpus, &manifest, Split::Stage2Train, targets)?;
        let dev = load_split(corpus, &manifest, Split::Stage2Dev, None)?;
        (train_stage2(&train, &dev, init_params.as_ref(), mode, &cfg.model, &tc, cfg.train_seed)?, dir)
    };
    write_run(cfg, &dir, &outcome)?;
    log::info!("selected epoch {} written to {}", outcome.selected_epoch, dir.join("selected.psdm").display());
    Ok(())
}

fn write_run(cfg: &RunConfig, dir: &Path, outcome: &TrainOutcome) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, params) in outcome.checkpoints.iter().enumerate() {
        write_checkpoint(params, &dir.join(format!("epoch_{:03}.psdm", i + 1)))?;
    }
    write_checkpoint(outcome.selected(), &dir.join("selected.psdm"))?;
    let log_path = dir.join("loss.log");
    std::fs::write(&log_path, format_log(&outcome.log)).with_context(|| format!("writing {}", log_path.display()))?;
    let mut history = String::from("epoch\ttrain_loss\tdev_accuracy\tbeta\n");
    for h in &outcome.history {
        let acc = h.dev_accuracy.map_or_else(|| "-".to_string(), |a| a.to_string());
        history.push_str(&format!("{}\t{}\t{acc}\t{}\n", h.epoch, h.train_loss, h.beta));
    }
    let hist_path = dir.join("epochs.tsv");
    std::fs::write(&hist_path, history).with_context(|| format!("writing {}", hist_path.display()))?;
    cfg.persist(dir)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let params = read_checkpoint(checkpoint)?;
    let corpus = &cfg.paths.corpus_dir;
    let manifest = read_manifest(corpus)?;
    let split = cfg.eval.split;
    let examples = load_split(corpus, &manifest, split, None)?;
    let scores = score_trials(&params, &examples)?;
    let report = metrics_report(&scores)?;
    let dir = out.unwrap_or_else(|| checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_score_file(&scores, &dir.join(format!("scores_{split}.tsv")))?;
    let report_path = dir.join(format!("metrics_{split}.txt"));
    std::fs::write(&report_path, &report).with_context(|| format!("writing {}", report_path.display()))?;
    cfg.persist(&dir)?;
    print!("{report}");
    Ok(())
}

fn cmd_report(scores: &Path) -> Result<(), Failure> {
    print!("{}", metrics_report(&read_score_file(scores)?)?);
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Failure> {
    let report = run_gradcheck(seed)?;
    for (stage, r) in [("stage1", &report.stage1), ("stage2", &report.stage2)] {
        for g in &r.groups {
            println!("{stage}\t{}\tchecked={}\tmax_rel_error={:.3e}", g.group, g.checked, g.max_rel_error);
        }
    }
    let worst = report.max_rel_error();
    if report.passes() {
        println!("gradcheck passed: max relative error {worst:.3e} <= {TOLERANCE:e}");
        Ok(())
    } else {
        println!("gradcheck FAILED: max relative error {worst:.3e} > {TOLERANCE:e}");
        Err(Failure { code: EXIT_VERIFY, err: anyhow!("gradient check failed") })
    }
}
