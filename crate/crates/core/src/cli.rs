//! Command-line front end: `gen-data`, `train`, `sweep`, `eval`, `bench`,
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate_extractor, head_cost_report, run_experiment_grid, GridAxis};
use crate::gradsuite::{run_gradient_suite, MAX_RELATIVE_ERROR};
use crate::model::init_extractor;
use crate::synthdata::{
    assign_longtail_counts, build_eval_protocol, build_universe_with_reserved, summarize_counts,
    write_dataset,
};
use crate::trainer::{Checkpoint, EpochMetrics, Trainer};

pub const SEED_ENV: &str = "DCQ_SEED";
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,ver_acc,id_rank1,wall_seconds";

#[derive(Parser, Debug)]
#[command(name = "dcq", version, about = "Dynamic class queue training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic universe, print its count summary, optionally write it out.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Binary dataset file to write; a `.summary.json` is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model into a fresh run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long, conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
        /// Also keep a checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Train one model per value of a single axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// K, alpha, sampling or method.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score a checkpoint on its evaluation protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation overrides such as `probes=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Closed-form head memory and compute for the queue and the full head.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        bytes_per_float: u64,
    },
    /// Randomized finite-difference check of both losses.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON run config or a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override applied after the file, e.g. `--set K=400`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricsFormat {
    Csv,
    Json,
}

/// Written first into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub overrides: Vec<String>,
    pub output_dir: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    /// Checkpoint a resumed run started from.
    #[serde(default)]
    pub resumed_from: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Entry point for the binary. `args[0]` is the program name.
pub fn run(args: &[String]) -> i32 {
    if args.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let _ = cmd.print_help();
        return 1;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::GenData { cfg, out } => {
            let config = load_config(&cfg)?;
            gen_data(&config, out.as_deref())?;
        }
        Command::Train {
            cfg,
            out,
            resume,
            checkpoint_every,
        } => {
            let dir = match resume {
                Some(ckpt) => resume_training(&ckpt, &out, checkpoint_every)?,
                None => {
                    let config = load_config(&cfg)?;
                    train_run(&config, &cfg.set, &out, checkpoint_every)?
                }
            };
            println!("{}", dir.display());
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            out,
        } => {
            let config = load_config(&cfg)?;
            let axis = GridAxis::parse(&axis).map_err(|e| Failure::Usage(e.to_string()))?;
            let dir = sweep_run(&config, &cfg.set, axis, &values, &out)?;
            println!("{}", dir.display());
        }
        Command::Eval { checkpoint, set } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut config = ckpt.config.clone();
            for s in &set {
                let key = s.split_once('=').map_or(s.as_str(), |(k, _)| k);
                let dotted = if key.contains('.') { s.clone() } else { format!("eval.{s}") };
                config.apply_override(&dotted).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            let report = eval_checkpoint(&ckpt, &config)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::Bench { cfg, bytes_per_float } => {
            let config = load_config(&cfg)?;
            let report = bench_report(&config, bytes_per_float)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
        }
        Command::Gradcheck { cases, seed } => {
            let results = run_gradient_suite(cases, seed)?;
            let failed = results.iter().filter(|c| !c.passed()).count();
            for c in &results {
                println!(
                    "case {:2} dims {:?} B={} K={} dcq {:.3e} fc {:.3e} {}",
                    c.case,
                    c.dims,
                    c.batch,
                    c.queue_size,
                    c.dcq_max_rel_error,
                    c.fc_max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Failure::Runtime(Error::NonFinite(format!(
                    "{failed} of {cases} cases exceed relative error {MAX_RELATIVE_ERROR:e}"
                ))));
            }
        }
    }
    Ok(())
}

/// Defaults, then `DCQ_SEED`, then the file (config or manifest), then `--set`.
fn load_config(args: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let mut base = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        base.train.seed = s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            config_from_text(&text, &base).map_err(usage)?
        }
        None => base,
    };
    for s in &args.set {
        config.apply_override(s).map_err(usage)?;
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

/// Parses a run config, or the `config` of a manifest, on top of `base`.
pub fn config_from_text(text: &str, base: &RunConfig) -> Result<RunConfig> {
    let mut file: Value = serde_json::from_str(text)?;
    if file.get("tool_version").is_some() {
        file = file
            .get_mut("config")
            .map(Value::take)
            .ok_or_else(|| Error::Config("manifest has no config".into()))?;
    }
    let mut tree = serde_json::to_value(base)?;
    merge(&mut tree, file);
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn gen_data(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let d = &config.data;
    let universe = build_universe_with_reserved(
        d.classes,
        d.reserved.unwrap_or(d.classes),
        d.d_in,
        d.sigma,
        config.data_seed(),
    )?;
    let counts = assign_longtail_counts(&d.longtail(), d.classes)?;
    let summary = summarize_counts(&counts);
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = out {
        write_dataset(path, &universe, &counts)?;
        let mut name = path.as_os_str().to_owned();
        name.push(".summary.json");
        fs::write(PathBuf::from(name), &text)?;
    }
    println!("{text}");
    Ok(())
}

/// Head costs of the configured method and of the full head, side by side.
pub fn bench_report(config: &RunConfig, bytes_per_float: u64) -> Result<Value> {
    let t = &config.train;
    let dims = config.layer_dims();
    let gen_macs = init_extractor(&dims, 0)?.macs_per_sample();
    let d = config.model.embed_dim as u64;
    let c = config.data.classes as u64;
    let dcq = head_cost_report(
        Method::Dcq,
        c,
        t.queue_size as u64,
        d,
        t.batch_size as u64,
        bytes_per_float,
        gen_macs,
    )?;
    let full = head_cost_report(Method::CosfaceFull, c, 0, d, t.batch_size as u64, bytes_per_float, 0)?;
    Ok(json!({ "dcq": dcq, "full": full }))
}

/// A directory built under a hidden temporary name and renamed into place
/// only on success; dropped unfinished, it is removed.
struct StagedDir {
    tmp: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl StagedDir {
    fn create(parent: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(parent)?;
        let stamp = unix_ms();
        let mut n = 0;
        let dest = loop {
            let suffix = if n == 0 { String::new() } else { format!("-{n}") };
            let cand = parent.join(format!("run-{stamp}-seed{seed}{suffix}"));
            let tmp_cand = tmp_name(&cand);
            if !cand.exists() && !tmp_cand.exists() {
                break cand;
            }
            n += 1;
        };
        let tmp = tmp_name(&dest);
        fs::create_dir(&tmp)?;
        Ok(Self { tmp, dest, done: false })
    }

    fn path(&self) -> &Path {
        &self.tmp
    }

    fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.tmp, &self.dest)?;
        self.done = true;
        Ok(self.dest.clone())
    }
}

fn tmp_name(dest: &Path) -> PathBuf {
    let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dest.with_file_name(format!(".tmp-{name}"))
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn new_manifest(command: &str, config: &RunConfig, overrides: &[String], dir: &Path) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: config.train.seed,
        config: config.resolved(),
        overrides: overrides.to_vec(),
        output_dir: dir.to_path_buf(),
        started_unix_ms: unix_ms(),
        finished_unix_ms: None,
        resumed_from: None,
    }
}

fn drive(
    mut trainer: Trainer,
    mut manifest: RunManifest,
    staged: StagedDir,
    checkpoint_every: Option<usize>,
) -> Result<PathBuf> {
    write_json(&staged.path().join("manifest.json"), &manifest)?;
    let mut rows = Vec::new();
    while !trainer.is_finished() {
        rows.push(trainer.run_epoch()?);
        let e = trainer.epochs_done();
        if checkpoint_every.is_some_and(|n| n > 0 && e.is_multiple_of(n) && !trainer.is_finished()) {
            trainer
                .checkpoint()
                .save(&staged.path().join(format!("checkpoint-epoch{e:03}.dcqc")))?;
        }
    }
    write_metrics(&rows, &staged.path().join("metrics.csv"), MetricsFormat::Csv)?;
    write_metrics(&rows, &staged.path().join("metrics.json"), MetricsFormat::Json)?;
    trainer.checkpoint().save(&staged.path().join("checkpoint.dcqc"))?;
    manifest.finished_unix_ms = Some(unix_ms());
    write_json(&staged.path().join("manifest.json"), &manifest)?;
    staged.commit()
}

/// Trains into a new directory under `out` and returns its path.
pub fn train_run(
    config: &RunConfig,
    overrides: &[String],
    out: &Path,
    checkpoint_every: Option<usize>,
) -> Result<PathBuf> {
    let staged = StagedDir::create(out, config.train.seed)?;
    let manifest = new_manifest("train", config, overrides, &staged.dest);
    let trainer = Trainer::from_config(config)?;
    drive(trainer, manifest, staged, checkpoint_every)
}

/// Continues a checkpointed run; the new directory holds the remaining epochs.
pub fn resume_training(ckpt_path: &Path, out: &Path, checkpoint_every: Option<usize>) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let staged = StagedDir::create(out, ckpt.config.train.seed)?;
    let mut manifest = new_manifest("train", &ckpt.config, &[], &staged.dest);
    manifest.resumed_from = Some(ckpt_path.to_path_buf());
    drive(trainer, manifest, staged, checkpoint_every)
}

pub fn sweep_run(
    config: &RunConfig,
    overrides: &[String],
    axis: GridAxis,
    values: &[String],
    out: &Path,
) -> Result<PathBuf> {
    let staged = StagedDir::create(out, config.train.seed)?;
    let mut manifest = new_manifest("sweep", config, overrides, &staged.dest);
    write_json(&staged.path().join("manifest.json"), &manifest)?;
    let report = run_experiment_grid(config, axis, values)?;
    fs::write(staged.path().join("grid.csv"), report.to_csv())?;
    write_json(&staged.path().join("grid.json"), &report)?;
    manifest.finished_unix_ms = Some(unix_ms());
    write_json(&staged.path().join("manifest.json"), &manifest)?;
    staged.commit()
}

/// Scores the checkpoint's extractor with the evaluation settings of `config`.
pub fn eval_checkpoint(ckpt: &Checkpoint, config: &RunConfig) -> Result<crate::evalbench::EvalReport> {
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let e = &config.eval;
    let protocol = build_eval_protocol(
        trainer.universe(),
        e.pairs,
        e.probes,
        e.distractors,
        crate::trainer::eval_protocol_seed(config),
    )?;
    let inputs = protocol.inputs(trainer.universe())?;
    evaluate_extractor(trainer.extractor(), &inputs, &protocol, trainer.counts())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.lr),
            fmt_f64(r.train_loss),
            fmt_f64(r.ver_acc),
            fmt_f64(r.id_rank1),
            fmt_f64(r.wall_seconds)
        ));
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Integrity("unexpected metrics header".into()));
    }
    let bad = |l: &str| Error::Integrity(format!("bad metrics row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                lr: num(1)?,
                train_loss: num(2)?,
                ver_acc: num(3)?,
                id_rank1: num(4)?,
                wall_seconds: num(5)?,
            })
        })
        .collect()
}

/// Column arrays; NaN becomes `null`.
pub fn metrics_to_json(rows: &[EpochMetrics]) -> Value {
    let col = |f: fn(&EpochMetrics) -> f64| -> Value {
        rows.iter()
            .map(|r| {
                let v = f(r);
                if v.is_finite() { json!(v) } else { Value::Null }
            })
            .collect()
    };
    json!({
        "epoch": rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        "lr": col(|r| r.lr),
        "train_loss": col(|r| r.train_loss),
        "ver_acc": col(|r| r.ver_acc),
        "id_rank1": col(|r| r.id_rank1),
        "wall_seconds": col(|r| r.wall_seconds),
    })
}

pub fn write_metrics(rows: &[EpochMetrics], path: &Path, format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => fs::write(path, metrics_to_csv(rows))?,
        MetricsFormat::Json => write_json(path, &metrics_to_json(rows))?,
    }
    Ok(())
}
