//! Subcommand implementations.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use isonmt_core::corpus::{ParallelCorpus, Side, Vocabulary};
use isonmt_core::metrics::{self, EvaluationReport};
use isonmt_core::policy::Policy;
use isonmt_core::rl::{self, Phase, RunContext, TraceRecord};
use isonmt_core::training::{self, TrainReport};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{key_help, Settings};
use crate::data::{self, write_lines, write_text, Task};
use crate::error::CliError;
use crate::report::{report_table, trace_table};
use crate::run_dir::{Manifest, RunDir, RunRecorder};

#[derive(Debug, Parser)]
#[command(
    name = "isonmt",
    version,
    about = "Reward-filtered self-training for length-compliant translation",
    after_long_help = key_help()
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and held-out corpora and the phoneme tables.
    MakeCorpus(RunArgs),
    /// Train a model on the reference corpus only.
    TrainBase(RunArgs),
    /// Base training, generation steps, filtered fine-tuning and optional distillation.
    RlRun(RunArgs),
    /// Fine-tune a checkpoint on a pair file with a consistency term towards a frozen teacher.
    Distill(DistillArgs),
    /// Score a checkpoint on a parallel test set.
    Evaluate(EvaluateArgs),
    /// Translate standard input line by line.
    Translate(TranslateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Student checkpoint to fine-tune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Source side of the training pairs.
    #[arg(long)]
    pub src: PathBuf,
    /// Target side of the training pairs.
    #[arg(long)]
    pub tgt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Directory for `report.json` and the hypotheses.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

pub fn load_settings(path: Option<&Path>, seed: Option<u64>) -> Result<Settings, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    Settings::parse(&text, seed)
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::MakeCorpus(a) => make_corpus(&a),
        Command::TrainBase(a) => train_base(&a),
        Command::RlRun(a) => rl_run(&a),
        Command::Distill(a) => distill(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Translate(a) => translate(&a),
    }
}

/// Runs `body` inside a locked output directory with a manifest.
fn in_run_dir(
    name: &str,
    args: &RunArgs,
    body: impl FnOnce(&Settings, &RunDir, &mut Manifest) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let settings = load_settings(args.config.as_deref(), args.seed)?;
    let dir = RunDir::acquire(&args.out)?;
    let mut manifest = Manifest::begin(&dir, name, args.config.as_deref(), &settings)?;
    let result = body(&settings, &dir, &mut manifest);
    manifest.finish(&dir, result.is_ok())?;
    result
}

fn write_json<T: Serialize>(
    dir: &RunDir,
    manifest: &mut Manifest,
    rel: &str,
    value: &T,
) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("serializable");
    write_text(&dir.file(rel)?, &(json + "\n"))?;
    manifest.add(rel);
    Ok(())
}

fn write_losses(
    dir: &RunDir,
    manifest: &mut Manifest,
    rel: &str,
    report: &TrainReport,
) -> Result<(), CliError> {
    let mut text = String::new();
    for (epoch, loss) in std::iter::once(&report.initial)
        .chain(&report.epochs)
        .enumerate()
    {
        #[derive(Serialize)]
        struct Line<'a> {
            epoch: usize,
            #[serde(flatten)]
            loss: &'a training::LossReport,
        }
        text.push_str(&serde_json::to_string(&Line { epoch, loss }).expect("serializable"));
        text.push('\n');
    }
    write_text(&dir.file(rel)?, &text)?;
    manifest.add(rel);
    Ok(())
}

fn write_task(task: &Task, dir: &RunDir, manifest: &mut Manifest) -> Result<(), CliError> {
    task.write(&dir.root().join("data"))?;
    manifest.add("data");
    Ok(())
}

fn initial_policy(settings: &Settings, train: &ParallelCorpus) -> Result<Policy, CliError> {
    let src = Vocabulary::build(train, Side::Source).map_err(CliError::run)?;
    let tgt = Vocabulary::build(train, Side::Target).map_err(CliError::run)?;
    Policy::init(settings.model, src, tgt, settings.seed)
        .map_err(|e| CliError::Config(e.to_string()))
}

fn make_corpus(args: &RunArgs) -> Result<(), CliError> {
    in_run_dir("make-corpus", args, |settings, dir, manifest| {
        let task = Task::from_settings(settings)?;
        write_task(&task, dir, manifest)?;
        println!(
            "wrote {} training and {} held-out pairs to {}",
            task.train.len(),
            task.test.as_ref().map_or(0, ParallelCorpus::len),
            dir.root().join("data").display()
        );
        Ok(())
    })
}

fn train_base(args: &RunArgs) -> Result<(), CliError> {
    in_run_dir("train-base", args, |settings, dir, manifest| {
        let task = Task::from_settings(settings)?;
        write_task(&task, dir, manifest)?;
        let mut policy = initial_policy(settings, &task.train)?;
        let report = training::train(&mut policy, &task.train, &settings.rl.base, None)
            .map_err(CliError::run)?;
        write_losses(dir, manifest, "train_loss.jsonl", &report)?;
        checkpoint::save(&policy, &dir.file("checkpoints/base.ckpt")?)?;
        manifest.add("checkpoints/base.ckpt");
        println!("final training loss {:.4}", report.last().total);
        if let Some(test) = &task.test {
            let (mut r, _) = metrics::evaluate(
                &policy,
                test,
                &task.source_counter,
                &task.target_counter,
                &settings.rl.decode,
            )
            .map_err(CliError::run)?;
            r.model_id = "base".into();
            r.test_set_id = "test".into();
            write_json(dir, manifest, "report.json", &[&r])?;
            print!("{}", report_table(&[r]));
        }
        Ok(())
    })
}

fn trace_report(record: &TraceRecord, model_id: &str, n: usize) -> EvaluationReport {
    EvaluationReport {
        model_id: model_id.into(),
        test_set_id: "test".into(),
        bleu: record.bleu,
        chrf: record.chrf,
        pcc_02: record.pcc_02,
        pcc_01: record.pcc_01,
        n_sentences: n,
        bleurt: None,
        comet: None,
    }
}

fn rl_run(args: &RunArgs) -> Result<(), CliError> {
    in_run_dir("rl-run", args, |settings, dir, manifest| {
        let task = Task::from_settings(settings)?;
        let Some(test) = &task.test else {
            return Err(CliError::Config(
                "rl-run needs a held-out set (test_src and test_tgt)".into(),
            ));
        };
        write_task(&task, dir, manifest)?;
        for stale in ["trace.jsonl", "checkpoints", "dg"] {
            let p = dir.root().join(stale);
            let _ = std::fs::remove_dir_all(&p).or_else(|_| std::fs::remove_file(&p));
        }
        let policy = initial_policy(settings, &task.train)?;
        let ctx = RunContext {
            eval_set: test,
            source_counter: &task.source_counter,
            target_counter: &task.target_counter,
        };
        let outcome = {
            let mut recorder = RunRecorder { dir, manifest };
            rl::run(&settings.rl, policy, &task.train, &ctx, &mut recorder)
                .map_err(CliError::run)?
        };
        write_losses(dir, manifest, "base_loss.jsonl", &outcome.base_report)?;
        let trace = &outcome.trace;
        let mut reports = vec![trace_report(&trace[0], "base", test.len())];
        if let Some(last_rl) = trace.iter().rev().find(|r| r.phase == Phase::Rl) {
            reports.push(trace_report(last_rl, "rl", test.len()));
        }
        if let Some(st) = trace.iter().find(|r| r.phase == Phase::Distill) {
            reports.push(trace_report(st, "rl+st", test.len()));
        }
        write_json(dir, manifest, "report.json", &reports)?;
        print!("{}", trace_table(trace));
        println!();
        print!("{}", report_table(&reports));
        Ok(())
    })
}

fn distill(args: &DistillArgs) -> Result<(), CliError> {
    let run_args = RunArgs {
        config: args.config.clone(),
        out: args.out.clone(),
        seed: args.seed,
    };
    in_run_dir("distill", &run_args, |settings, dir, manifest| {
        let mut student = checkpoint::load(&args.checkpoint)?;
        let teacher = checkpoint::load(&args.teacher)?;
        let (pairs, _) = data::load_parallel(&args.src, &args.tgt, "src", "tgt")?;
        let teacher_sum = teacher.checksum();
        let report = training::train(&mut student, &pairs, &settings.rl.distill, Some(&teacher))
            .map_err(CliError::run)?;
        debug_assert_eq!(teacher_sum, teacher.checksum());
        write_losses(dir, manifest, "train_loss.jsonl", &report)?;
        checkpoint::save(&student, &dir.file("checkpoints/distilled.ckpt")?)?;
        manifest.add("checkpoints/distilled.ckpt");
        let last = report.last();
        println!(
            "ce {:.4} kl {:.4} total {:.4}",
            last.ce, last.kl, last.total
        );
        Ok(())
    })
}

fn file_id(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let settings = load_settings(args.config.as_deref(), None)?;
    let policy = checkpoint::load(&args.checkpoint)?;
    let (test, _) = data::load_parallel(&args.src, &args.tgt, "src", "tgt")?;
    let (sc, tc) = data::counters(&settings)?;
    let (mut report, hyps) =
        metrics::evaluate(&policy, &test, &sc, &tc, &settings.rl.decode).map_err(CliError::run)?;
    report.model_id = file_id(&args.checkpoint);
    report.test_set_id = file_id(&args.src);
    if let Some(out) = &args.out {
        let dir = RunDir::acquire(out)?;
        let mut manifest = Manifest::begin(&dir, "evaluate", args.config.as_deref(), &settings)?;
        write_json(&dir, &mut manifest, "report.json", &report)?;
        write_lines(&dir.file("hypotheses.txt")?, &hyps)?;
        manifest.add("hypotheses.txt");
        manifest.finish(&dir, true)?;
    }
    print!("{}", report_table(&[report]));
    Ok(())
}

fn translate(args: &TranslateArgs) -> Result<(), CliError> {
    let settings = load_settings(args.config.as_deref(), None)?;
    let policy = checkpoint::load(&args.checkpoint)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(|e| CliError::io("<stdin>", e))?;
        let hyp = if line.trim().is_empty() {
            String::new()
        } else {
            policy
                .translate(&line, &settings.rl.decode)
                .map_err(|e| CliError::Run(format!("line {}: {e}", i + 1)))?
                .0
        };
        writeln!(out, "{hyp}").map_err(|e| CliError::io("<stdout>", e))?;
    }
    Ok(())
}
