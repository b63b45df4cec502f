//! Dataset bundles on disk, single evaluated runs and ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalClass, MetricReport, Stat};
use crate::phantom::{load_dataset, save_dataset, DataBundle, DataConfig, Role};
use crate::trainer::{run, Ablation, RunConfig, TrainData, Trainer};

/// Subdirectory names of a generated dataset root.
pub const SOURCE_DIR: &str = "source";
pub const TARGET_TRAIN_DIR: &str = "target-train";
pub const TARGET_ORACLE_DIR: &str = "target-oracle";
pub const TARGET_TEST_DIR: &str = "target-test";

pub fn save_bundle(b: &DataBundle, dir: &Path) -> Result<()> {
    save_dataset(&b.source, &dir.join(SOURCE_DIR))?;
    save_dataset(&b.target_train, &dir.join(TARGET_TRAIN_DIR))?;
    save_dataset(&b.target_oracle, &dir.join(TARGET_ORACLE_DIR))?;
    save_dataset(&b.target_test, &dir.join(TARGET_TEST_DIR))?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DataBundle> {
    let load = |name: &str, role: Role| -> Result<_> {
        let ds = load_dataset(&dir.join(name))?;
        if ds.role != role {
            return Err(Error::Config(format!("{}/{name} holds a {:?} dataset", dir.display(), ds.role)));
        }
        Ok(ds)
    };
    Ok(DataBundle {
        source: load(SOURCE_DIR, Role::Source)?,
        target_train: load(TARGET_TRAIN_DIR, Role::TargetTrain)?,
        target_oracle: load(TARGET_ORACLE_DIR, Role::TargetOracle)?,
        target_test: load(TARGET_TEST_DIR, Role::TargetTest)?,
    })
}

/// Contents of `run.json`: enough to rerun the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    /// Checkpoint a resumed training run started from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
}

pub fn write_run_record<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<()> {
    write_resumed_record(dir, command, config, None)
}

pub fn write_resumed_record<C: Serialize>(dir: &Path, command: &str, config: &C, resumed_from: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rec = RunRecord {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config,
        resumed_from: resumed_from.map(|p| p.to_string_lossy().into_owned()),
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

pub fn write_metrics(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("metrics.txt"), report.to_table())?;
    Ok(())
}

/// Trains one configuration from scratch and evaluates it on target-test.
/// With `out`, the run directory receives `run.json`, the log, checkpoints
/// and the metric files.
pub fn train_and_evaluate(cfg: &RunConfig, bundle: &DataBundle, out: Option<&Path>) -> Result<MetricReport> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let data = TrainData::for_mode(
        cfg.ablation,
        Some(&bundle.source),
        Some(&bundle.target_train),
        Some(&bundle.target_oracle),
    )?;
    if let Some(dir) = out {
        write_run_record(dir, "train", cfg)?;
    }
    run(&mut trainer, &data, out)?;
    let p = &trainer.state.params;
    let report = evaluate(&trainer.nets, &p.extractor, &p.classifier, &bundle.target_test)?;
    if let Some(dir) = out {
        write_metrics(dir, &report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Root written by `generate-data`. When absent the data is generated
    /// from `data` into `<out>/data`.
    pub data_dir: Option<String>,
    pub data: DataConfig,
    /// Base run; each variant overrides the ablation mode (and selection).
    pub run: RunConfig,
    pub modes: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Extra `full` variants with these generator feature selections.
    pub feature_selections: Vec<[usize; 3]>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            data: DataConfig::default(),
            run: RunConfig::desk(),
            modes: vec![Ablation::Full, Ablation::SourceOnly, Ablation::NoSkip, Ablation::FeatureSpace],
            seeds: vec![0],
            feature_selections: Vec::new(),
        }
    }
}

/// One row of an ablation table before seeds are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

pub fn selection_label(sel: [usize; 3]) -> String {
    format!("full_sel_{}-{}-{}", sel[0], sel[1], sel[2])
}

impl AblateConfig {
    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablate needs at least one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        let mut out: Vec<Variant> = self
            .modes
            .iter()
            .map(|&m| Variant { label: m.name().into(), config: self.run.clone().for_mode(m) })
            .collect();
        for &sel in &self.feature_selections {
            let mut config = self.run.clone().for_mode(Ablation::Full);
            config.net.feature_selection = sel;
            out.push(Variant { label: selection_label(sel), config });
        }
        if out.is_empty() {
            return Err(Error::Config("ablate needs at least one mode or feature selection".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for v in &out {
            if !labels.insert(v.label.clone()) {
                return Err(Error::Config(format!("variant {} listed twice", v.label)));
            }
            v.config.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricReport,
}

/// Across-seed statistics of the per-run mean values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: EvalClass,
    pub dice: Stat,
    pub sen: Stat,
    pub spe: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub ablation: Ablation,
    pub feature_selection: [usize; 3],
    pub use_skip_connections: bool,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<ClassSummary>,
}

impl VariantResult {
    fn new(v: &Variant, seeds: Vec<SeedResult>) -> Self {
        let summary = EvalClass::ALL
            .iter()
            .map(|&class| {
                let col = |f: &dyn Fn(&crate::metrics::ClassRow) -> f64| -> Vec<f64> {
                    seeds.iter().filter_map(|s| s.report.row(class)).map(f).collect()
                };
                ClassSummary {
                    class,
                    dice: Stat::of(&col(&|r| r.dice.mean)),
                    sen: Stat::of(&col(&|r| r.sen.mean)),
                    spe: Stat::of(&col(&|r| r.spe.mean)),
                }
            })
            .collect();
        Self {
            label: v.label.clone(),
            ablation: v.config.ablation,
            feature_selection: v.config.net.feature_selection,
            use_skip_connections: v.config.net.use_skip_connections,
            seeds,
            summary,
        }
    }

    pub fn class(&self, class: EvalClass) -> Option<&ClassSummary> {
        self.summary.iter().find(|s| s.class == class)
    }

    /// Mean over seeds of the per-slice mean infection Dice.
    pub fn infection_dice(&self) -> f64 {
        self.class(EvalClass::Infection).map_or(f64::NAN, |s| s.dice.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantResult>,
}

impl AblationSummary {
    pub fn row(&self, label: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Dice per class, mean ± 95% half-width over seeds, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<18} {:>9} {:>5}", "Variant", "Selection", "Skip");
        for c in EvalClass::ALL {
            let _ = write!(out, " {:>15}", c.label());
        }
        out.push('\n');
        for r in &self.rows {
            let s = r.feature_selection;
            let skip = if r.use_skip_connections { "yes" } else { "no" };
            let _ = write!(out, "{:<18} {:>9} {:>5}", r.label, format!("{},{},{}", s[0], s[1], s[2]), skip);
            for c in &r.summary {
                let _ = write!(out, " {:>15}", format!("{:6.2} ± {:5.2}", 100.0 * c.dice.mean, 100.0 * c.dice.half_width));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "(Dice %, mean over seeds {:?} of per-slice means on target-test)", self.seeds);
        out
    }
}

/// Runs every variant for every seed; configurations that coincide (for
/// example a selection sweep entry equal to the base) are trained once.
/// Each run lives in `<out>/runs/<label>/seed_<n>` when `out` is given.
pub fn run_ablation(
    cfg: &AblateConfig,
    bundle: &DataBundle,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationSummary> {
    let variants = cfg.variants()?;
    let mut done: HashMap<String, MetricReport> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in &variants {
        let mut seeds = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut rc = v.config.clone();
            rc.seed = seed;
            rc.paths = Default::default();
            let key = serde_json::to_string(&rc)?;
            let report = match done.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let dir = out.map(|o| o.join("runs").join(&v.label).join(format!("seed_{seed}")));
                    if let Some(d) = &dir {
                        rc.paths.out = Some(d.to_string_lossy().into_owned());
                    }
                    let r = train_and_evaluate(&rc, bundle, dir.as_deref())?;
                    done.insert(key, r.clone());
                    r
                }
            };
            let inf = report.row(EvalClass::Infection).map_or(f64::NAN, |r| r.dice.mean);
            progress(&format!("{} seed {seed}: infection dice {:.2}%", v.label, 100.0 * inf));
            seeds.push(SeedResult { seed, report });
        }
        rows.push(VariantResult::new(v, seeds));
    }
    let summary = AblationSummary { seeds: cfg.seeds.clone(), rows };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        fs::write(dir.join("comparison.txt"), summary.to_table())?;
    }
    Ok(summary)
}
