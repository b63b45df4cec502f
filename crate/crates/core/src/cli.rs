//! Command-line front end: argument parsing, strict config resolution and
//! the five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiment::{
    load_bundle, run_ablation, save_bundle, write_metrics, write_resumed_record, write_run_record,
    AblateConfig,
};
use crate::metrics::evaluate;
use crate::nets::Networks;
use crate::phantom::{build_datasets, load_dataset, DataConfig, Dataset};
use crate::report::write_report;
use crate::trainer::{load_checkpoint, run, RunConfig, TrainData, Trainer};

#[derive(Debug, Parser)]
#[command(name = "udaseg", version, about = "Domain-adaptive lung infection segmentation on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file; keys mirror the config struct, unknown keys are errors.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one value by dotted path, e.g. `net.base_width=8`. Values
    /// parse as JSON and fall back to a plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for data generation or training (ablate: run only this seed).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Output directory; each command has its own default.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source, target-train, target-oracle and target-test datasets.
    GenerateData(Common),
    /// Train one run and write its log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Evaluate(Common),
    /// Train and evaluate every ablation variant for every seed.
    Ablate(Common),
    /// Plot loss curves and metric bars from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from a checkpoint archive.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run, evaluation or ablation directories.
    #[arg(value_name = "DIR")]
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<String>,
    /// Labeled dataset directory, normally `target-test`.
    pub data: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub inputs: Vec<String>,
    /// Moving-average window for loss curves.
    pub window: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { inputs: Vec::new(), window: 50 }
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Recursively overlays `patch` onto `base`. Objects merge, everything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets `key` (dotted path, array indices allowed) to `raw`. Every segment
/// must already exist so typos fail loudly.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for seg in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg),
            Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *cur = value;
    Ok(())
}

/// Defaults, then the config file, then each `--set`, then strict parsing.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, common: &Common) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(path) = &common.config {
        let text = read_file(path)?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut v, file);
    }
    for s in &common.set {
        let (k, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        set_path(&mut v, k.trim(), raw)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Creates `dir`; a non-empty one is an error unless `force` clears it.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir)?.next().is_none();
        if !empty {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            if dir.is_dir() {
                fs::remove_dir_all(dir)?;
            } else {
                fs::remove_file(dir)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn no_seed(common: &Common, cmd: &str) -> Result<()> {
    match common.seed {
        Some(_) => Err(Error::Config(format!("{cmd} takes no --seed"))),
        None => Ok(()),
    }
}

fn require<'a>(v: &'a Option<String>, what: &str) -> Result<&'a str> {
    v.as_deref().ok_or_else(|| Error::Config(format!("missing input: set {what}")))
}

/// Sizes the compute pool from `UDASEG_THREADS`. Must run before any
/// network work.
pub fn apply_thread_cap() -> Result<()> {
    let Ok(s) = std::env::var("UDASEG_THREADS") else {
        return Ok(());
    };
    let n: usize = s
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UDASEG_THREADS must be a positive integer, got {s:?}")))?;
    // A pool that already exists (repeated calls in one process) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn generate_data(common: &Common) -> Result<String> {
    let mut cfg = resolve(&DataConfig::default(), common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| "data".into());
    let bundle = build_datasets(&cfg)?;
    prepare_out(&out, common.force)?;
    write_run_record(&out, "generate-data", &cfg)?;
    save_bundle(&bundle, &out)?;
    Ok(format!(
        "wrote {} source, {} target-train, {} target-test slices to {}",
        bundle.source.len(),
        bundle.target_train.len(),
        bundle.target_test.len(),
        out.display()
    ))
}

fn load_opt(path: &Option<String>) -> Result<Option<Dataset>> {
    path.as_deref().map(|p| load_dataset(Path::new(p))).transpose()
}

fn train(args: &TrainArgs) -> Result<String> {
    let common = &args.common;
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let defaults = match &resumed {
        Some((cfg, _)) => cfg.clone(),
        None => {
            // Mode-dependent defaults (alpha, skips) follow the requested ablation.
            let probe: RunConfig = resolve(&RunConfig::desk(), common)?;
            RunConfig::desk().for_mode(probe.ablation)
        }
    };
    let mut cfg = resolve(&defaults, common)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().or_else(|| cfg.paths.out.clone().map(PathBuf::from)).unwrap_or_else(|| "run".into());
    cfg.paths.out = Some(out.to_string_lossy().into_owned());
    cfg.validate()?;
    let trainer = match resumed {
        Some((ck, state)) => {
            if (ck.net != cfg.net, ck.ablation != cfg.ablation, ck.image_size != cfg.image_size, ck.seed != cfg.seed)
                != (false, false, false, false)
            {
                return Err(Error::Config(
                    "checkpoint/config mismatch: net, ablation, image_size and seed cannot change on resume".into(),
                ));
            }
            Trainer::from_state(cfg.clone(), state)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let source = load_opt(&cfg.paths.source)?;
    let target_train = load_opt(&cfg.paths.target_train)?;
    let oracle = load_opt(&cfg.paths.target_oracle)?;
    for ds in [&source, &target_train, &oracle].into_iter().flatten() {
        if let Some(s) = ds.samples.first() {
            if (s.slice.height(), s.slice.width()) != (cfg.image_size, cfg.image_size) {
                return Err(Error::Shape(format!(
                    "image_size {} but {:?} slices are {}x{}",
                    cfg.image_size,
                    ds.role,
                    s.slice.height(),
                    s.slice.width()
                )));
            }
        }
    }
    let data = TrainData::for_mode(cfg.ablation, source.as_ref(), target_train.as_ref(), oracle.as_ref())?;
    let mut trainer = trainer;
    if args.resume.is_some() {
        fs::create_dir_all(&out)?;
        truncate_log(&out.join("log.jsonl"), trainer.state.iteration)?;
    } else {
        prepare_out(&out, common.force)?;
    }
    write_resumed_record(&out, "train", &cfg, args.resume.as_deref())?;
    let summary = run(&mut trainer, &data, Some(&out))?;
    Ok(format!(
        "trained {} to iteration {}; final checkpoint {}",
        cfg.ablation.name(),
        summary.iterations,
        out.join("final.ckpt").display()
    ))
}

/// Keeps the first `keep` lines of an existing log so a resumed run appends
/// where its checkpoint left off.
fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text.lines().take(keep as usize).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept)?;
    Ok(())
}

fn evaluate_cmd(common: &Common) -> Result<String> {
    no_seed(common, "evaluate")?;
    let cfg = resolve(&EvalConfig::default(), common)?;
    let ckpt = PathBuf::from(require(&cfg.checkpoint, "checkpoint")?);
    let data = PathBuf::from(require(&cfg.data, "data")?);
    let (rc, state) = load_checkpoint(&ckpt)?;
    let test = load_dataset(&data)?;
    if let Some(s) = test.samples.first() {
        if (s.slice.height(), s.slice.width()) != (rc.image_size, rc.image_size) {
            return Err(Error::Config(format!(
                "checkpoint/config mismatch: checkpoint trained at {0}x{0}, data is {1}x{2}",
                rc.image_size,
                s.slice.height(),
                s.slice.width()
            )));
        }
    }
    let out = common.out.clone().unwrap_or_else(|| "eval".into());
    prepare_out(&out, common.force)?;
    write_run_record(&out, "evaluate", &cfg)?;
    let nets = Networks::new(&rc.net)?;
    let report = evaluate(&nets, &state.params.extractor, &state.params.classifier, &test)?;
    write_metrics(&out, &report)?;
    Ok(report.to_table().trim_end().to_string())
}

fn ablate(common: &Common) -> Result<String> {
    let mut cfg = resolve(&AblateConfig::default(), common)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.variants()?;
    let out = common.out.clone().unwrap_or_else(|| "ablate".into());
    let bundle = match &cfg.data_dir {
        Some(d) => load_bundle(Path::new(d))?,
        None => build_datasets(&cfg.data)?,
    };
    prepare_out(&out, common.force)?;
    write_run_record(&out, "ablate", &cfg)?;
    if cfg.data_dir.is_none() {
        save_bundle(&bundle, &out.join("data"))?;
    }
    let summary = run_ablation(&cfg, &bundle, Some(&out), &mut |line| eprintln!("{line}"))?;
    Ok(summary.to_table().trim_end().to_string())
}

fn report(args: &ReportArgs) -> Result<String> {
    let common = &args.common;
    no_seed(common, "report")?;
    let mut cfg = resolve(&ReportConfig::default(), common)?;
    cfg.inputs.extend(args.inputs.iter().map(|p| p.to_string_lossy().into_owned()));
    let out = common.out.clone().unwrap_or_else(|| "report".into());
    let inputs: Vec<PathBuf> = cfg.inputs.iter().map(PathBuf::from).collect();
    for i in &inputs {
        if !i.is_dir() {
            return Err(Error::MissingFile(i.clone()));
        }
    }
    prepare_out(&out, common.force)?;
    write_run_record(&out, "report", &cfg)?;
    let idx = write_report(&inputs, &out, cfg.window)?;
    Ok(format!(
        "wrote {} loss curves, {} metric plots and {} comparison plots to {}",
        idx.loss_curves.len(),
        idx.metric_plots.len(),
        idx.comparison_plots.len(),
        out.display()
    ))
}

/// Runs a parsed command and returns its one-paragraph summary.
pub fn execute(cli: &Cli) -> Result<String> {
    apply_thread_cap()?;
    match &cli.command {
        Command::GenerateData(c) => generate_data(c),
        Command::Train(a) => train(a),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::Ablate(c) => ablate(c),
        Command::Report(a) => report(a),
    }
}

/// The single stderr line printed on failure.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error category={}: {}", e.category(), msg.trim())
}
