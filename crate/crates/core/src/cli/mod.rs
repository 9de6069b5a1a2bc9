//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and maps the outcome to an exit code: 0 on success, 2 on a configuration
//! error (including bad usage), 1 on a runtime failure.

pub mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use run::{hash_path, write_atomic, RunDir, RunManifest, LOCK_FILE, MANIFEST_FILE};

use crate::config::{parse_override, resolve, Preset, RunConfig};
use crate::dataset::{
    build_folds, generate_synthetic, ingest_layout, instrument, write_synthetic, IngestedDataset, LabelAudit, SplitPlan,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, cross_magnification, evaluate, label_efficiency_sweep, read_predictions_csv, write_predictions_csv,
    write_sweep_csv, EvalReport, XmagMatrix, XmagMode,
};
use crate::magnification::MagnificationFactor;
use crate::model::{Checkpoint, EncoderAdapter, HeadState, MetricRecord};
use crate::report::{export_features, grad_cam, overlay, pca_2d, render_projection, render_tables, write_npy, MethodReports};
use crate::rng::{self, domain};
use crate::train::{finetune, predict, pretrain_with, select, FinetuneConfig, MetricLog};

/// Environment variable naming the default root for run directories.
pub const RUN_ROOT_ENV: &str = "MPCS_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "mpcs", version, about = "Magnification-prior contrastive pre-training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Preset supplying every default: paper-effnet, paper-resnet, synth-fast, synth-full.
    #[arg(long, default_value = "synth-fast")]
    pub preset: String,
    /// TOML file layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `pretrain.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Single seed from which every random stream derives.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Run directory. Defaults to `$MPCS_RUN_ROOT/<command>-seed<seed>`, or `runs/...`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InitArgs {
    /// Checkpoint whose encoder initialises training.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Start from a randomly initialised encoder instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub random_init: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Dataset root in the class/patient/specimen/MF layout.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    /// Label fraction of the training folds.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Test fold.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Run every fold and aggregate.
    #[arg(long)]
    pub all_folds: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-magnification dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        specimens: Option<usize>,
        #[arg(long)]
        patients: Option<usize>,
        /// Side of the stored images in pixels.
        #[arg(long)]
        image_size: Option<u32>,
        /// Strength of per-view acquisition drift in [0, 2].
        #[arg(long)]
        acquisition: Option<f32>,
    },
    /// Contrastive pre-training on every fold except the held-out test fold.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pair strategy: fixed, ordered or random.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Test fold kept out of pre-training.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Pre-train on every specimen, test folds included.
        #[arg(long)]
        all_folds: bool,
        /// Write a checkpoint every N epochs; 0 keeps only the final one.
        #[arg(long, default_value_t = 50)]
        save_every: usize,
    },
    /// Supervised fine-tuning of encoder and classifier.
    Finetune(TrainArgs),
    /// Linear evaluation: frozen encoder, trained classifier.
    Lineval(TrainArgs),
    /// Metrics from a predictions file, or from a fine-tuned checkpoint on a test fold.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Label-efficiency sweep over label fractions.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        init: InitArgs,
        /// Comma-separated fractions, e.g. `0.05,0.2,1.0`.
        #[arg(long)]
        fractions: Option<String>,
        /// finetune or lineval.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Cross-magnification evaluation (type 1 and type 2 tables).
    Xmag {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        data: PathBuf,
        /// Directory of fine-tuned checkpoints named by training magnification, e.g. `40X.mpcs`.
        #[arg(long, conflicts_with_all = ["ckpt", "random_init"])]
        ckpts: Option<PathBuf>,
        #[command(flatten)]
        init: InitArgs,
        /// finetune or lineval, when models are trained here.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Feature dump with 2-D projection, Grad-CAM maps and result tables.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// `METHOD=PATH` to a JSON list of fold reports. Repeatable.
        #[arg(long, value_name = "METHOD=PATH")]
        table: Vec<String>,
        /// breakhis, bach or bisque.
        #[arg(long)]
        layout: Option<String>,
        /// ila or pla.
        #[arg(long)]
        metric: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Lineval(_) => "lineval",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Xmag { .. } => "xmag",
            Command::Report { .. } => "report",
        }
    }

    fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::Synth { cfg, .. }
            | Command::Pretrain { cfg, .. }
            | Command::Eval { cfg, .. }
            | Command::Sweep { cfg, .. }
            | Command::Xmag { cfg, .. }
            | Command::Report { cfg, .. } => cfg,
            Command::Finetune(t) | Command::Lineval(t) => &t.cfg,
        }
    }

    /// Flag values that override config keys; applied after `--set`.
    fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut ov = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                ov.push((k.to_string(), v));
            }
        };
        match self {
            Command::Synth {
                specimens,
                patients,
                image_size,
                acquisition,
                ..
            } => {
                push("synth.n_specimens", specimens.map(|v| v.to_string()));
                push("synth.n_patients", patients.map(|v| v.to_string()));
                push("synth.image_size", image_size.map(|v| v.to_string()));
                push("synth.acquisition", acquisition.map(|v| v.to_string()));
            }
            Command::Pretrain { strategy, epochs, .. } => {
                push("pretrain.strategy", strategy.as_ref().map(|s| format!("{:?}", s.to_ascii_lowercase())));
                push("pretrain.epochs", epochs.map(|v| v.to_string()));
            }
            Command::Finetune(t) => push("finetune.label_fraction", t.fraction.map(|v| v.to_string())),
            Command::Lineval(t) => push("lineval.label_fraction", t.fraction.map(|v| v.to_string())),
            Command::Sweep { fractions, stage, .. } => {
                push("sweep.fractions", fractions.as_ref().map(|f| format!("[{f}]")));
                push("sweep.stage", stage.as_ref().map(|s| format!("{s:?}")));
            }
            Command::Report { layout, metric, .. } => {
                push("report.layout", layout.as_ref().map(|s| format!("{:?}", s.to_ascii_lowercase())));
                push("report.metric", metric.as_ref().map(|s| format!("{:?}", s.to_ascii_lowercase())));
            }
            _ => {}
        }
        push("seed", self.config_args().seed.map(|s| s.to_string()));
        ov
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::Synth { out, .. } => Some(out),
            Command::Pretrain { out, .. }
            | Command::Eval { out, .. }
            | Command::Sweep { out, .. }
            | Command::Xmag { out, .. }
            | Command::Report { out, .. } => out.out.as_deref(),
            Command::Finetune(t) | Command::Lineval(t) => t.out.out.as_deref(),
        }
    }

    /// Files and directories the command reads; all must exist.
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Command::Synth { .. } => {}
            Command::Pretrain { data, .. } => v.push(data),
            Command::Finetune(t) | Command::Lineval(t) => {
                v.push(&t.data);
                v.extend(t.init.ckpt.as_deref());
            }
            Command::Eval {
                predictions, ckpt, data, ..
            } => {
                v.extend(predictions.as_deref());
                v.extend(ckpt.as_deref());
                v.extend(data.as_deref());
            }
            Command::Sweep { data, init, .. } => {
                v.push(data);
                v.extend(init.ckpt.as_deref());
            }
            Command::Xmag { data, ckpts, init, .. } => {
                v.push(data);
                v.extend(ckpts.as_deref());
                v.extend(init.ckpt.as_deref());
            }
            Command::Report { data, ckpt, .. } => {
                v.extend(data.as_deref());
                v.extend(ckpt.as_deref());
            }
        }
        v
    }
}

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Resolves the command's configuration without running it.
pub fn resolve_config(command: &Command) -> Result<RunConfig> {
    let args = command.config_args();
    let preset: Preset = args.preset.parse()?;
    let mut overrides = args.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    overrides.extend(command.flag_overrides());
    resolve(preset, args.config.as_deref(), &overrides)
}

fn execute(command: &Command, argv: Vec<String>) -> Result<()> {
    let cfg = resolve_config(command)?;
    for p in command.inputs() {
        if !p.exists() {
            return Err(Error::Config(format!("input {} does not exist", p.display())));
        }
    }
    let out = command
        .out()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_root().join(format!("{}-seed{}", command.name(), cfg.seed)));
    let mut dir = RunDir::open(
        &out,
        command.name(),
        argv,
        serde_json::to_value(&cfg)?,
        vec![cfg.seed],
        &command.inputs(),
    )?;
    let config_path = dir.path("config.toml");
    fs::write(&config_path, cfg.to_toml()?)?;
    dir.artifact("config", &config_path);
    let outcome = dispatch(command, &cfg, &mut dir);
    if let Err(e) = &outcome {
        warn!("{} failed: {e}", command.name());
    }
    let finished = dir.finish(&outcome);
    outcome?;
    finished
}

fn dispatch(command: &Command, cfg: &RunConfig, dir: &mut RunDir) -> Result<()> {
    match command {
        Command::Synth { .. } => cmd_synth(cfg, dir),
        Command::Pretrain {
            data,
            fold,
            all_folds,
            save_every,
            ..
        } => cmd_pretrain(cfg, dir, data, (!all_folds).then_some(*fold), *save_every),
        Command::Finetune(t) => cmd_train(cfg, dir, t, &cfg.finetune),
        Command::Lineval(t) => cmd_train(cfg, dir, t, &cfg.lineval),
        Command::Eval {
            predictions,
            ckpt,
            data,
            fold,
            ..
        } => cmd_eval(cfg, dir, predictions.as_deref(), ckpt.as_deref().zip(data.as_deref()), *fold),
        Command::Sweep { data, init, fold, .. } => cmd_sweep(cfg, dir, data, init, *fold),
        Command::Xmag {
            data,
            ckpts,
            init,
            stage,
            fold,
            ..
        } => cmd_xmag(cfg, dir, data, ckpts.as_deref(), init, stage.as_deref(), *fold),
        Command::Report {
            data,
            ckpt,
            fold,
            table,
            ..
        } => cmd_report(cfg, dir, ckpt.as_deref().zip(data.as_deref()), *fold, table),
    }
}

fn write_json<T: serde::Serialize>(dir: &mut RunDir, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.path(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&path, &serde_json::to_vec_pretty(value)?)?;
    dir.artifact(name, &path);
    Ok(path)
}

fn write_predictions(dir: &mut RunDir, name: &str, preds: &[crate::eval::PredictionRecord]) -> Result<()> {
    let path = dir.path(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_predictions_csv(preds, fs::File::create(&path)?)?;
    dir.artifact(name, &path);
    Ok(())
}

fn save_checkpoint(dir: &mut RunDir, name: &str, ckpt: &Checkpoint) -> Result<()> {
    let path = dir.path(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ckpt.save(&path)?;
    dir.artifact(name, &path);
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let set = generate_synthetic(&cfg.synth)?;
    let index = write_synthetic(&set, &dir.root)?;
    info!("wrote {} synthetic specimens to {}", index.specimens.len(), dir.root.display());
    let index_path = dir.path("index.json");
    dir.artifact("index", &index_path);
    Ok(())
}

/// Loads the dataset and its deterministic split plan, saving the plan.
fn load(cfg: &RunConfig, dir: &mut RunDir, data: &Path) -> Result<(IngestedDataset, SplitPlan)> {
    let ds = ingest_layout(data)?;
    for w in &ds.warnings {
        warn!("{}: {}", w.path.display(), w.message);
    }
    let plan = build_folds(&ds.samples, cfg.folds, cfg.seed)?;
    let path = dir.path("split.json");
    plan.save(&path)?;
    dir.artifact("split", &path);
    Ok((ds, plan))
}

/// Leakage counters written next to a pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainAudit {
    pub label_reads: usize,
    pub holdout_fold: Option<usize>,
    /// Held-out specimens that appeared in a training batch.
    pub held_out_seen: usize,
}

fn cmd_pretrain(cfg: &RunConfig, dir: &mut RunDir, data: &Path, holdout: Option<usize>, save_every: usize) -> Result<()> {
    let (ds, plan) = load(cfg, dir, data)?;
    let mut samples = match holdout {
        Some(fold) => {
            if fold >= plan.k {
                return Err(Error::Config(format!("fold {fold} out of range for k = {}", plan.k)));
            }
            let test = plan.fold_members(fold);
            let keep: BTreeSet<String> = plan.folds.keys().filter(|id| !test.contains(*id)).cloned().collect();
            select(&ds.samples, &keep)
        }
        None => ds.samples.clone(),
    };
    let p = &cfg.pretrain;
    let encoder = EncoderAdapter::build(&p.encoder, p.input_size, &mut rng::stream(p.seed, &[domain::INIT, 0]))?;
    let log_path = dir.path("metrics.jsonl");
    let mut log = MetricLog::create(&log_path)?;
    dir.artifact("metrics", &log_path);
    let mut periodic = Vec::new();
    let root = dir.root.clone();
    // Pre-training must stay label-free; count every label read it makes.
    let audit = LabelAudit::new();
    instrument(&mut samples, &audit);
    let run = pretrain_with(p, &samples, encoder, |end| {
        log.append(&MetricRecord {
            epoch: end.epoch,
            split: "pretrain".into(),
            loss: Some(end.loss),
            ila: None,
            pla: None,
        })?;
        info!("pretrain epoch {}: loss {:.5} spread {:.3e}", end.epoch, end.loss, end.spread);
        if save_every > 0 && (end.epoch + 1) % save_every == 0 {
            let mut ck = Checkpoint::new(end.encoder.clone(), HeadState::Projection(end.head.clone()));
            ck.epoch = end.epoch + 1;
            let name = format!("checkpoints/epoch_{:04}.mpcs", end.epoch + 1);
            fs::create_dir_all(root.join("checkpoints"))?;
            ck.save(&root.join(&name))?;
            periodic.push(name);
        }
        Ok(())
    })?;
    for name in periodic {
        let path = dir.path(&name);
        dir.artifact(&name, &path);
    }
    let mut ckpt = run.checkpoint;
    ckpt.class_names = ds.class_names.clone();
    save_checkpoint(dir, "checkpoint.mpcs", &ckpt)?;
    let curve = dir.path("loss_curve.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in run.loss_curve.iter().enumerate() {
        text.push_str(&format!("{i},{l:.9}\n"));
    }
    fs::write(&curve, text)?;
    dir.artifact("loss_curve", &curve);
    write_json(dir, "seen_specimens.json", &run.seen_specimens)?;
    let held_out = holdout.map(|f| plan.fold_members(f)).unwrap_or_default();
    let audit = PretrainAudit {
        label_reads: audit.reads(),
        holdout_fold: holdout,
        held_out_seen: run.seen_specimens.intersection(&held_out).count(),
    };
    write_json(dir, "audit.json", &audit)?;
    Ok(())
}

fn init_encoder(cfg: &RunConfig, init: &InitArgs, input_size: usize) -> Result<EncoderAdapter> {
    match (&init.ckpt, init.random_init) {
        (Some(path), _) => Ok(Checkpoint::load(path)?.encoder),
        (None, true) => EncoderAdapter::build(
            &cfg.pretrain.encoder,
            input_size,
            &mut rng::stream(cfg.seed, &[domain::INIT, 0]),
        ),
        (None, false) => Err(Error::Config("pass --ckpt <path> or --random-init".into())),
    }
}

fn stage_config<'a>(cfg: &'a RunConfig, stage: &str) -> Result<&'a FinetuneConfig> {
    match stage {
        "finetune" => Ok(&cfg.finetune),
        "lineval" => Ok(&cfg.lineval),
        other => Err(Error::Config(format!("stage must be finetune or lineval, got {other:?}"))),
    }
}

fn cmd_train(cfg: &RunConfig, dir: &mut RunDir, args: &TrainArgs, stage: &FinetuneConfig) -> Result<()> {
    let (ds, plan) = load(cfg, dir, &args.data)?;
    let encoder = init_encoder(cfg, &args.init, stage.input_size)?;
    let folds: Vec<usize> = if args.all_folds { (0..plan.k).collect() } else { vec![args.fold] };
    let mut reports = Vec::new();
    for &fold in &folds {
        let prefix = if args.all_folds { format!("fold_{fold}/") } else { String::new() };
        let run = finetune(stage, &encoder, &plan, fold, &ds.samples)?;
        let mut ckpt = run.checkpoint;
        ckpt.class_names = ds.class_names.clone();
        save_checkpoint(dir, &format!("{prefix}checkpoint.mpcs"), &ckpt)?;
        write_predictions(dir, &format!("{prefix}predictions.csv"), &run.predictions)?;
        write_json(dir, &format!("{prefix}report.json"), &run.report)?;
        write_json(dir, &format!("{prefix}trained_specimens.json"), &run.trained_specimens)?;
        let log_path = dir.path(&format!("{prefix}metrics.jsonl"));
        let mut log = MetricLog::create(&log_path)?;
        for r in &run.history {
            log.append(r)?;
        }
        dir.artifact(&format!("{prefix}metrics"), &log_path);
        info!("fold {fold}: test ila {:.4} pla {:.4}", run.report.ila, run.report.pla);
        reports.push(run.report);
    }
    if args.all_folds {
        write_json(dir, "cv_reports.json", &reports)?;
        let agg = aggregate(&reports)?;
        println!("ILA {} PLA {} over {} folds", agg.ila, agg.pla, agg.folds);
        write_json(dir, "aggregate.json", &agg)?;
    } else {
        println!("ILA {:.4} PLA {:.4}", reports[0].ila, reports[0].pla);
    }
    Ok(())
}

fn classifier_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.classifier_head().is_none() {
        return Err(Error::Config(format!(
            "{} has no classifier head; fine-tune it first",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn cmd_eval(
    cfg: &RunConfig,
    dir: &mut RunDir,
    predictions: Option<&Path>,
    model: Option<(&Path, &Path)>,
    fold: usize,
) -> Result<()> {
    let preds = match (predictions, model) {
        (Some(p), _) => read_predictions_csv(fs::File::open(p)?)?,
        (None, Some((ckpt_path, data))) => {
            let ckpt = classifier_checkpoint(ckpt_path)?;
            let (ds, plan) = load(cfg, dir, data)?;
            let test = plan.fold_members(fold);
            let head = ckpt.classifier_head().expect("checked");
            let preds = predict(&ckpt.encoder, head, &ds.samples, &test, &cfg.finetune.eval_magnifications)?;
            write_predictions(dir, "predictions.csv", &preds)?;
            preds
        }
        (None, None) => return Err(Error::Config("pass --predictions, or --ckpt with --data".into())),
    };
    let report = evaluate(&preds, fold)?;
    println!("ILA {:.4} PLA {:.4} over {} images", report.ila, report.pla, report.n_images);
    write_json(dir, "report.json", &report)?;
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, dir: &mut RunDir, data: &Path, init: &InitArgs, fold: usize) -> Result<()> {
    let stage = stage_config(cfg, &cfg.sweep.stage)?;
    let (ds, plan) = load(cfg, dir, data)?;
    let encoder = init_encoder(cfg, init, stage.input_size)?;
    let rows = label_efficiency_sweep(&plan, &cfg.sweep.fractions, |fraction| {
        let c = FinetuneConfig {
            label_fraction: fraction,
            ..stage.clone()
        };
        let report = finetune(&c, &encoder, &plan, fold, &ds.samples)?.report;
        info!("fraction {fraction}: ila {:.4}", report.ila);
        Ok(report)
    })?;
    let path = dir.path("sweep.csv");
    write_sweep_csv(&rows, fs::File::create(&path)?)?;
    dir.artifact("sweep", &path);
    let as_map: BTreeMap<String, &EvalReport> =
        rows.iter().map(|(f, r)| (crate::dataset::fraction_key(*f), r)).collect();
    write_json(dir, "sweep.json", &as_map)?;
    Ok(())
}

/// Parses a training magnification from a file stem such as `40X` or `ft_200x`.
fn stem_magnification(path: &Path) -> Option<MagnificationFactor> {
    let stem = path.file_stem()?.to_string_lossy().into_owned();
    stem.split(['_', '-', '.'])
        .filter_map(|t| {
            let t = t.to_ascii_uppercase();
            t.ends_with('X').then(|| t.parse().ok()).flatten()
        })
        .next_back()
}

fn cmd_xmag(
    cfg: &RunConfig,
    dir: &mut RunDir,
    data: &Path,
    ckpts: Option<&Path>,
    init: &InitArgs,
    stage: Option<&str>,
    fold: usize,
) -> Result<()> {
    let (ds, plan) = load(cfg, dir, data)?;
    let test = plan.fold_members(fold);
    let mut models: BTreeMap<MagnificationFactor, Checkpoint> = BTreeMap::new();
    match ckpts {
        Some(root) => {
            let mut files: Vec<PathBuf> = fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                if let Some(mf) = stem_magnification(&f) {
                    models.insert(mf, classifier_checkpoint(&f)?);
                }
            }
        }
        None => {
            let stage = stage_config(cfg, stage.unwrap_or("finetune"))?;
            let encoder = init_encoder(cfg, init, stage.input_size)?;
            for mf in MagnificationFactor::ALL {
                let c = FinetuneConfig {
                    train_magnifications: vec![mf],
                    ..stage.clone()
                };
                let mut ckpt = finetune(&c, &encoder, &plan, fold, &ds.samples)?.checkpoint;
                ckpt.class_names = ds.class_names.clone();
                save_checkpoint(dir, &format!("ckpts/{}.mpcs", mf.dir_name()), &ckpt)?;
                models.insert(mf, ckpt);
            }
        }
    }
    let mut matrix = XmagMatrix::new();
    let mut cells = String::from("train,eval,ila,pla\n");
    for (&train_mf, ckpt) in &models {
        let head = ckpt.classifier_head().expect("classifier");
        for eval_mf in MagnificationFactor::ALL {
            let preds = predict(&ckpt.encoder, head, &ds.samples, &test, &[eval_mf])?;
            let report = evaluate(&preds, fold)?;
            cells.push_str(&format!("{train_mf},{eval_mf},{:.6},{:.6}\n", report.ila, report.pla));
            matrix.insert((train_mf, eval_mf), report);
        }
    }
    let path = dir.path("matrix.csv");
    fs::write(&path, cells)?;
    dir.artifact("matrix", &path);
    let t1 = cross_magnification(&matrix, XmagMode::Type1)?;
    let t2 = cross_magnification(&matrix, XmagMode::Type2)?;
    let mut table = String::from("magnification,type1_ila,type1_pla,type2_ila,type2_pla\n");
    for mf in MagnificationFactor::ALL {
        table.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            mf.dir_name(),
            t1[&mf].ila,
            t1[&mf].pla,
            t2[&mf].ila,
            t2[&mf].pla
        ));
    }
    print!("{table}");
    let path = dir.path("xmag.csv");
    fs::write(&path, table)?;
    dir.artifact("xmag", &path);
    Ok(())
}

fn cmd_report(
    cfg: &RunConfig,
    dir: &mut RunDir,
    model: Option<(&Path, &Path)>,
    fold: usize,
    tables: &[String],
) -> Result<()> {
    if model.is_none() && tables.is_empty() {
        return Err(Error::Config("nothing to report: pass --ckpt with --data, or --table".into()));
    }
    if let Some((ckpt_path, data)) = model {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let (ds, plan) = load(cfg, dir, data)?;
        let test = select(&ds.samples, &plan.fold_members(fold));
        let dump = export_features(&ckpt.encoder, &test, &MagnificationFactor::ALL)?;
        let path = dir.path("features.csv");
        dump.write_csv(fs::File::create(&path)?)?;
        dir.artifact("features", &path);
        write_json(
            dir,
            "features.json",
            &serde_json::json!({ "encoder_id": dump.encoder_id, "rows": dump.rows.len(), "dim": dump.dim() }),
        )?;
        let points = pca_2d(&dump.matrix());
        let mut text = String::from("specimen_id,magnification,label,pc1,pc2\n");
        for (r, p) in dump.rows.iter().zip(points.rows()) {
            text.push_str(&format!("{},{},{},{:.9},{:.9}\n", r.specimen_id, r.magnification, r.label, p[0], p[1]));
        }
        let path = dir.path("projection.csv");
        fs::write(&path, text)?;
        dir.artifact("projection", &path);
        let path = dir.path("projection.png");
        render_projection(&points, &dump.labels(), 256).save(&path)?;
        dir.artifact("projection_png", &path);

        match ckpt.classifier_head() {
            None => warn!("checkpoint has no classifier head; skipping Grad-CAM"),
            Some(head) => {
                fs::create_dir_all(dir.path("cam"))?;
                let targets = test
                    .iter()
                    .flat_map(|s| MagnificationFactor::ALL.map(|mf| (s, mf)))
                    .take(cfg.report.cam_images);
                for (s, mf) in targets {
                    let img = s.image(mf).expect("complete");
                    let id = format!("{}_{}", s.specimen_id, mf.dir_name());
                    let one = BTreeSet::from([s.specimen_id.clone()]);
                    let class = predict(&ckpt.encoder, head, std::slice::from_ref(s), &one, &[mf])?[0].predicted_label;
                    let cam = grad_cam(&ckpt.encoder, head, img, &id, class, &cfg.report.cam_layer)?;
                    let npy = dir.path(&format!("cam/{id}.npy"));
                    write_npy(&npy, &cam.map)?;
                    dir.artifact(&format!("cam/{id}.npy"), &npy);
                    let png = dir.path(&format!("cam/{id}.png"));
                    overlay(&cam.map, img, cfg.report.overlay_alpha).save(&png)?;
                    dir.artifact(&format!("cam/{id}.png"), &png);
                }
            }
        }
    }
    if !tables.is_empty() {
        let methods = tables
            .iter()
            .map(|t| {
                let (method, path) = parse_override(t)?;
                let bytes = fs::read(&path)
                    .map_err(|e| Error::Config(format!("cannot read reports {path}: {e}")))?;
                Ok(MethodReports {
                    method,
                    reports: serde_json::from_slice(&bytes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let table = render_tables(&methods, cfg.report.layout, cfg.report.metric)?;
        let path = dir.path("table.csv");
        fs::write(&path, table.to_csv()?)?;
        dir.artifact("table", &path);
        let text = table.to_text();
        print!("{text}");
        let path = dir.path("table.txt");
        fs::write(&path, text)?;
        dir.artifact("table_text", &path);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_from_stem() {
        assert_eq!(stem_magnification(Path::new("d/40X.mpcs")), Some(MagnificationFactor::X40));
        assert_eq!(stem_magnification(Path::new("ft_200x.mpcs")), Some(MagnificationFactor::X200));
        assert_eq!(stem_magnification(Path::new("notes.txt")), None);
    }

    #[test]
    fn flags_win_over_set() {
        let cli = Cli::try_parse_from([
            "mpcs", "pretrain", "--data", "d", "--set", "pretrain.epochs=3", "--epochs", "4", "--strategy", "Random",
            "--seed", "9",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.command).unwrap();
        assert_eq!(cfg.pretrain.epochs, 4);
        assert_eq!(cfg.pretrain.strategy, crate::sampler::StrategyKind::Random);
        assert_eq!(cfg.pretrain.seed, 9);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mpcs", "synth"]), 2);
        assert_eq!(run(["mpcs", "nosuch"]), 2);
        assert_eq!(run(["mpcs", "--help"]), 0);
    }
}
