//! The `alc` command line: `synth`, `train`, `eval` and `ablate`.
//!
//! Machine-readable output goes to stdout, diagnostics to stderr. Files are
//! only written below the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{EvalSplit, RunConfig};
use crate::data::{export_dataset, load_yolo_dataset, write_manifest, Manifest};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::train::{
    ablation_csv, ablation_table, evaluate_detector, prepare, run_ablation_row, train, AblationRow, PreparedSet,
    ABLATION_PLAN,
};

pub const DEFAULT_OUT: &str = "alc-out";

#[derive(Debug, Parser)]
#[command(name = "alc", version, about = "Classroom behaviour detector: synthesize data, train, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the model, the scene generator and the data order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `alc-out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit a single JSON document on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val splits and a manifest.
    Synth(Common),
    /// Train a detector; writes a step log and checkpoints.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split root containing `images/` and `labels/`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and score the eight toggle combinations.
    Ablate(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_seed(c.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.json"), &(cfg.to_pretty_json() + "\n"))
}

fn stdout_line(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

/// Writes the synthetic splits under `root`; returns their paths.
fn synthesize(cfg: &RunConfig, root: &Path) -> Result<(PathBuf, PathBuf, Manifest)> {
    let spec = &cfg.synth.scene;
    let (train_dir, val_dir) = (root.join("train"), root.join("val"));
    let train = export_dataset(spec, 0, cfg.synth.n_train, &train_dir)?;
    let val = export_dataset(spec, cfg.synth.n_train as u64, cfg.synth.n_val, &val_dir)?;
    let manifest = Manifest::new(&[("train", &train), ("val", &val)]);
    write_manifest(&root.join("manifest.json"), &manifest)?;
    Ok((train_dir, val_dir, manifest))
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c, &cfg)?;
    echo_config(&dir, &cfg)?;
    let (_, _, manifest) = synthesize(&cfg, &dir)?;
    if c.json {
        stdout_line(&serde_json::to_string(&manifest).expect("manifest serializes"))?;
    } else {
        for (split, n) in &manifest.splits {
            stdout_line(&format!("{split}: {n} images"))?;
        }
    }
    Ok(())
}

/// Train and val splits from the config, synthesizing into `<out>/data` when
/// no training path is given. The val set is `None` when absent or empty.
fn datasets(cfg: &RunConfig, dir: &Path) -> Result<(PreparedSet, Option<PreparedSet>)> {
    let (train_path, val_path) = match &cfg.data.train {
        Some(t) => (t.clone(), cfg.data.val.clone()),
        None => {
            eprintln!("no data.train given; synthesizing into {}", dir.join("data").display());
            let (t, v, _) = synthesize(cfg, &dir.join("data"))?;
            (t, Some(v))
        }
    };
    let size = cfg.model.input_size as u32;
    let nc = cfg.model.num_classes;
    let train_set = prepare(&load_yolo_dataset(&train_path)?, size, nc)?;
    let val_set = match val_path {
        Some(v) => Some(prepare(&load_yolo_dataset(&v)?, size, nc)?).filter(|s| !s.is_empty()),
        None => None,
    };
    Ok((train_set, val_set))
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    initial_total: f64,
    final_total: f64,
    best_step: usize,
    best_total: f64,
    last_checkpoint: PathBuf,
    best_checkpoint: PathBuf,
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c, &cfg)?;
    echo_config(&dir, &cfg)?;
    let (train_set, _) = datasets(&cfg, &dir)?;
    eprintln!("training on {} images for {} steps", train_set.len(), cfg.optimizer.iterations);
    let log_path = dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let outcome = train(&cfg, &train_set, |s| {
        let line = s.to_json_line();
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{line}") {
                io_err = Some(e);
            }
        }
        if !c.json {
            println!("{line}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let last_entry = outcome.log.last().expect("iterations ≥ 1");
    let last_path = dir.join("last.ckpt");
    let best_path = dir.join("best.ckpt");
    checkpoint::save(&last_path, &outcome.last, &CheckpointMeta { step: last_entry.step, total_loss: Some(last_entry.total) })?;
    checkpoint::save(&best_path, &outcome.best, &CheckpointMeta { step: outcome.best_step, total_loss: Some(outcome.best_loss) })?;
    let summary = TrainSummary {
        steps: outcome.log.len(),
        initial_total: outcome.log[0].total,
        final_total: last_entry.total,
        best_step: outcome.best_step,
        best_total: outcome.best_loss,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    };
    if c.json {
        stdout_line(&serde_json::to_string(&summary).expect("summary serializes"))?;
    } else {
        eprintln!(
            "done: total loss {:.4} -> {:.4}; checkpoints in {}",
            summary.initial_total,
            summary.final_total,
            dir.display()
        );
    }
    Ok(())
}

fn report_text(r: &EvalReport) -> String {
    let mut s = format!(
        "images {}  P {:.4}  R {:.4}  mAP50 {:.4}  mAP50-95 {:.4}\n",
        r.images, r.precision, r.recall, r.map50, r.map50_95
    );
    for c in &r.per_class {
        match &c.ap {
            Some(ap) => {
                let mean = ap.iter().sum::<f64>() / ap.len() as f64;
                s.push_str(&format!("  {:<18} {:>5}  AP50 {:.4}  AP50-95 {:.4}\n", c.name, c.instances, ap[0], mean));
            }
            None => s.push_str(&format!("  {:<18} {:>5}  -\n", c.name, 0)),
        }
    }
    s
}

fn cmd_eval(c: &Common, ckpt: &Path, data: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let (det, _) = checkpoint::load(ckpt)?;
    let mc = det.config();
    let set = prepare(&load_yolo_dataset(data)?, mc.input_size as u32, mc.num_classes)?;
    if set.is_empty() {
        return Err(Error::config(format!("{} contains no images", data.display())));
    }
    let report = evaluate_detector(&det, &set, &cfg.eval)?;
    // Files are only written when an output directory is requested.
    if c.out.is_some() || cfg.out.is_some() {
        let dir = out_dir(c, &cfg)?;
        write_file(&dir.join("report.json"), &(report.to_json() + "\n"))?;
        write_file(&dir.join("report.csv"), &report.to_csv())?;
    }
    let text = if c.json { report.to_json() } else { report_text(&report) };
    stdout_line(text.trim_end())
}

fn cmd_ablate(c: &Common) -> Result<i32> {
    let cfg = load_config(c)?;
    let dir = out_dir(c, &cfg)?;
    echo_config(&dir, &cfg)?;
    let (train_set, val_set) = datasets(&cfg, &dir)?;
    let eval_set = match (cfg.ablation.eval_split, &val_set) {
        (EvalSplit::Val, Some(v)) => v,
        (EvalSplit::Val, None) => {
            eprintln!("no validation images; scoring ablation rows on the training split");
            &train_set
        }
        (EvalSplit::Train, _) => &train_set,
    };
    let mut rows = Vec::with_capacity(ABLATION_PLAN.len());
    for (name, a, b, cc) in ABLATION_PLAN {
        eprintln!("ablation row {name}");
        let row = match run_ablation_row(&cfg, (a, b, cc), &train_set, eval_set) {
            Ok((r, _)) => AblationRow { model: name.into(), metrics: Some([r.precision, r.recall, r.map50, r.map50_95]), error: None },
            Err(e) => {
                eprintln!("row {name} failed: {e}");
                AblationRow { model: name.into(), metrics: None, error: Some(e.to_string()) }
            }
        };
        rows.push(row);
    }
    write_file(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    if c.json {
        stdout_line(&serde_json::to_string(&rows).expect("rows serialize"))?;
    } else {
        stdout_line(ablation_table(&rows).trim_end())?;
    }
    Ok(if rows.iter().all(|r| r.metrics.is_some()) { 0 } else { 4 })
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(c) => cmd_synth(c).map(|_| 0),
        Command::Train(c) => cmd_train(c).map(|_| 0),
        Command::Eval { common, checkpoint, data } => cmd_eval(common, checkpoint, data).map(|_| 0),
        Command::Ablate(c) => cmd_ablate(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
